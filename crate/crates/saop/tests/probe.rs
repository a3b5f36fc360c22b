// temporary empirical probe, not part of the deliverable
use saop::mras::{run, SaopConfig};
use saop::problems::dubins_car;

#[test]
fn probe_dubins_fullhorizon() {
    let problem = dubins_car();
    for sigma0 in [1.0, 2.0] {
        let mut good = 0;
        let mut good_by_10 = 0;
        let mut in_band = 0;
        let t_all = std::time::Instant::now();
        for seed in 0..10u64 {
            let config = SaopConfig {
                seed: 9100 + seed,
                n_initial: 100,
                sigma0,
                max_iterations: 60,
                max_samples: 50_000,
                ..Default::default()
            };
            let result = run(&problem, &config, None).unwrap();
            let mut first_good_iter = None;
            for r in &result.history {
                if let Ok((traj, _)) = problem.rollout(&r.mu, None) {
                    if problem.goal_reached(&traj) && !problem.trajectory_collides(&traj) {
                        first_good_iter = Some(r.k);
                        break;
                    }
                }
            }
            let (goal, collided) = match problem.rollout(&result.w_star, None) {
                Ok((traj, _)) => (
                    problem.goal_reached(&traj),
                    problem.trajectory_collides(&traj),
                ),
                Err(_) => (false, true),
            };
            if goal && !collided {
                good += 1;
            }
            if first_good_iter.is_some_and(|k| k <= 10) {
                good_by_10 += 1;
            }
            if result.j_star >= 500.0 && result.j_star <= 1200.0 {
                in_band += 1;
            }
            println!(
                "s0={sigma0} seed {seed}: iters={:2} J*={:9.2} goal={goal} first_good={:?}",
                result.iterations, result.j_star, first_good_iter,
            );
        }
        println!(
            "SIGMA0={sigma0}: goal {good}/10, by10 {good_by_10}/10, band {in_band}/10, {:.0?}",
            t_all.elapsed()
        );
    }
}

//! Single-view DDIM sampling with the closed-form toy denoiser.
//!
//! Prints the `x0` prediction error per step; with the toy denoiser it stays
//! at rounding level while the sample itself moves from noise to the target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texsync::diffusion::{
    ddim_step, standard_normal_grid, view_rng, Denoiser, NoiseSchedule, ToyDenoiser, ViewConditioning,
};
use texsync::grid::Grid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let eta: f64 = std::env::args().nth(2).map(|s| s.parse()).transpose()?.unwrap_or(0.0);
    let sched = NoiseSchedule::default_with_steps(steps)?;

    let zeros = Grid::zeros(16, 16, 4);
    let target = standard_normal_grid(16, 16, 4, &mut ChaCha8Rng::seed_from_u64(1)).axpby(0.5, &zeros, 0.0);
    let denoiser = ToyDenoiser::new(vec![target.clone()], &sched);
    let cond = ViewConditioning::bare(0);
    let mut rng = view_rng(42, 0);
    let mut x = standard_normal_grid(16, 16, 4, &mut rng);

    for (t, t_prev) in sched.step_pairs() {
        let out = denoiser.query(&x, t, &cond)?;
        let (next, x0) = ddim_step(&x, &out.eps_cond, t, t_prev, &sched, eta, &mut rng)?;
        println!(
            "t {t:4} -> {t_prev:4}  |x0_pred - target| {:.2e}  |x - target| {:.3}",
            x0.distance(&target),
            next.distance(&target)
        );
        x = next;
    }
    Ok(())
}

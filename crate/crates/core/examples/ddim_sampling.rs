//! The noise schedule and the deterministic DDIM sampler. With a predictor
//! that returns the true noise, sampling from any timestep lands back on the
//! clean latent.

use idfusion::diffusion::{ddim_step, ddim_timesteps, make_noise_schedule, q_sample, LatentTensor};
use idfusion::rng;

fn main() -> idfusion::Result<()> {
    let sched = make_noise_schedule(1000, 0.00085, 0.012)?;
    for t in [1, 250, 500, 750, 1000] {
        println!("t={t:4}  alpha_bar={:.5}", sched.alpha_bar(t)?);
    }

    let mut r = rng::stream(7, "example");
    let z0 = LatentTensor::new(rng::normal(&mut r, (8, 8, 4), 1.0))?;
    let eps = LatentTensor::new(rng::normal(&mut r, (8, 8, 4), 1.0))?;

    for n in [1, 10, 30] {
        let steps = ddim_timesteps(&sched, n)?;
        let mut z = q_sample(&z0, steps[0].0, &eps, &sched)?;
        for (t, t_prev) in steps {
            // The oracle predictor: the exact noise that takes z0 to z_t.
            let ab = sched.alpha_bar(t)?;
            let e = LatentTensor::new((z.data() - &(z0.data() * ab.sqrt())) / (1.0 - ab).sqrt())?;
            z = ddim_step(&z, &e, t, t_prev, &sched)?;
        }
        let err = z.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{n:2} DDIM steps: max |z - z0| = {err:.2e}");
    }
    Ok(())
}

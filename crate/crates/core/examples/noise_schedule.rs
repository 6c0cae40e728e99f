//! Prints the linear schedule and the DDPM/DDIM coefficients at a few steps.
//!
//! cargo run --example noise_schedule

use pmg::schedule::{ddim_sigma_between, sampler_coefficients, SamplerMode, ScheduleConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = ScheduleConfig::default().build()?;
    println!("T = {}", s.step_count());
    println!("{:>5} {:>10} {:>12} {:>12} {:>10} {:>10}", "t", "beta", "alpha_bar", "post_var", "ddpm_w", "ddim_v");
    for t in [1, 10, 50, 100, 250, 500, 1000] {
        let ddpm = sampler_coefficients(&s, t, SamplerMode::Ddpm)?;
        let ddim = sampler_coefficients(&s, t, SamplerMode::Ddim { eta: 0.0 })?;
        println!(
            "{t:>5} {:>10.6} {:>12.6e} {:>12.6e} {:>10.6} {:>10.6}",
            s.beta(t)?,
            s.alpha_bar(t)?,
            s.posterior_variance(t)?,
            ddpm.w,
            ddim.v
        );
    }

    // strided jumps use the previous selected timestep
    for (t, prev) in [(100, 90), (100, 50), (1000, 900)] {
        println!("sigma({t} -> {prev}, eta = 1) = {:.6}", ddim_sigma_between(&s, t, prev, 1.0)?);
    }
    Ok(())
}

use crate::diffusion::NoisePredictor;
use crate::error::{invalid, Result};
use crate::field::Field;
use crate::schedule::NoiseSchedule;

/// Exact MMSE noise prediction when every cell of `x0` is i.i.d.
/// `N(mu0, var0)`.
pub fn gaussian_oracle_eps(
    x_t: &Field,
    t: usize,
    mu0: f64,
    var0: f64,
    s: &NoiseSchedule,
) -> Result<Field> {
    s.check_step(t)?;
    if !(var0 >= 0.0) {
        return invalid!("prior variance must be non-negative, got {var0}");
    }
    let ab = s.alpha_bar(t);
    let noise_var = 1.0 - ab;
    if noise_var <= 0.0 {
        return invalid!("1 - alpha_bar_{t} = 0: no noise to predict");
    }
    let sab = ab.sqrt();
    let denom = ab * var0 + noise_var;
    let sn = noise_var.sqrt();
    Ok(x_t.map(|x| {
        let post_mean = (sab * var0 * x + noise_var * mu0) / denom;
        (x - sab * post_mean) / sn
    }))
}

/// [`gaussian_oracle_eps`] bound to a prior and schedule.
///
/// Labels are ignored.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mu0: f64,
    pub var0: f64,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for GaussianOracle {
    fn predict_eps(&self, x_t: &Field, t: usize, _label: Option<usize>) -> Result<Field> {
        gaussian_oracle_eps(x_t, t, self.mu0, self.var0, &self.schedule)
    }
}

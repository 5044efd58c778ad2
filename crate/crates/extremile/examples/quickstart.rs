//! Minimal supervised fit, as shown in the README.

use extremile::{fit_supervised, BasisSpec, FitOptions, LabeledData};
use ndarray::array;

fn main() -> extremile::Result<()> {
    let x = array![[1., 0.1], [1., 0.4], [1., 0.9], [1., 0.3]];
    let y = array![1.2, 1.9, 3.1, 1.7];
    let data = LabeledData::new(x, y)?;
    let basis = BasisSpec::default_polynomial();
    let fit = fit_supervised(&data, &basis, &[0.25, 0.75], &FitOptions::default())?;
    println!("beta(0.75) = {}", fit.beta_at(0.75)?);
    Ok(())
}

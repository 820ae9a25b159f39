use super::NumericsError;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), NumericsError> {
    if a.len() != b.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "paired statistic",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(NumericsError::TooFewRows { needed: 2, got: a.len() });
    }
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, NumericsError> {
    check_pair(pred, truth)?;
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    if ss_tot == 0.0 {
        return Err(NumericsError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64, NumericsError> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(NumericsError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

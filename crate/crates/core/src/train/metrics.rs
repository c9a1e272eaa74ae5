use crate::{Error, Result};

fn check(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    Ok(())
}

/// `sqrt(mean((y - y_hat)^2))`.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(mse_loss(preds, targets)?.0.sqrt())
}

/// Mean squared error and its gradient `2 (y_hat - y) / N` per prediction.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    check(preds, targets)?;
    let n = preds.len() as f64;
    let loss = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let grad = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0], &[0.0, 2.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let t = [0.3, 1.2, -0.4];
        let p: Vec<f64> = t.iter().map(|x| x - 0.25).collect();
        assert!((rmse(&p, &t).unwrap() - 0.25).abs() < 1e-12);
        assert!(rmse(&[1.0], &[]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse_loss(&[0.5, 1.5], &[0.5, 1.5]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
        let (l, g) = mse_loss(&[1.0], &[0.0]).unwrap();
        assert_eq!((l, g), (1.0, vec![2.0]));
        let (p, t) = ([0.1, 0.7, 2.0], [0.0, 1.0, 1.5]);
        let r = rmse(&p, &t).unwrap();
        assert!((mse_loss(&p, &t).unwrap().0 - r * r).abs() < 1e-15);
    }
}

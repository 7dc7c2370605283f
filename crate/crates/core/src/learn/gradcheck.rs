/// Largest absolute discrepancy divided by the largest gradient magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, x| m.max(x.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences on the listed coordinates against `analytic`.
pub fn grad_check_coords(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    let numeric = numeric_gradient(f, x, coords, h);
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    max_relative_error(&picked, &numeric)
}

/// Central differences over every coordinate. `f` returns the loss and its
/// analytic gradient.
pub fn grad_check(f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>), x: &[f64], h: f64) -> f64 {
    let (_, analytic) = f(x);
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(&mut |p| f(p).0, x, &analytic, &coords, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let a = [3.0, -1.0, 0.5];
        let mut f = |x: &[f64]| {
            let v: f64 = x.iter().zip(&a).map(|(x, a)| a * x * x).sum();
            let g = x.iter().zip(&a).map(|(x, a)| 2.0 * a * x).collect();
            (v, g)
        };
        assert!(grad_check(&mut f, &[0.2, 1.5, -2.0], 1e-5) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut f = |x: &[f64]| (x[0] * x[0], vec![x[0]]);
        assert!(grad_check(&mut f, &[1.0], 1e-5) > 0.4);
    }
}

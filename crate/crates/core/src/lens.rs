//! Lens (filter) functions mapping an embedding to a real value.

/// A real-valued function on embeddings that guides the mapper cover.
pub trait Lens: Sync {
    fn name(&self) -> &str;
    fn value(&self, vector: &[f64]) -> f64;
}

/// Euclidean norm of the embedding. The only built-in lens.
#[derive(Debug, Clone, Copy, Default)]
pub struct L2Norm;

impl Lens for L2Norm {
    fn name(&self) -> &str {
        "l2"
    }

    fn value(&self, vector: &[f64]) -> f64 {
        l2_norm(vector)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(L2Norm.value(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), None);
    }
}

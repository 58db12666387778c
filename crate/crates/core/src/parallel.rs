//! Data-parallel map helpers. With the `parallel` feature (default) the
//! batch map fans out over rayon; without it, the same API falls back to a
//! sequential loop. Outputs are index-ordered either way, so batch results
//! and any subsequent in-order reductions are identical across thread
//! counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Sequential fallback with the same signature.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential map; the benchmark baseline the parallel path is
/// compared against.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Indexed variant so workers can derive per-item seeds.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let par = par_map(&items, |&x| x * x);
        let seq = seq_map(&items, |&x| x * x);
        assert_eq!(par, seq);
    }

    #[test]
    fn indexed_map_sees_indices() {
        let items = vec![10u64, 20, 30];
        let out = par_map_indexed(&items, |i, &x| x + i as u64);
        assert_eq!(out, vec![10, 21, 32]);
    }
}

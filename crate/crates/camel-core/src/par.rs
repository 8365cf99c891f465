//! Data-parallel map helpers. With the `parallel` feature (default) the
//! ordered map fans out over rayon; results always come back in input order,
//! so callers are bit-identical either way.

/// Map preserving input order; parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    map_sequential(items, f)
}

/// Always-sequential variant; the benchmark baseline.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let seq = map_sequential(&items, |&i| i * 3);
        let par = map_ordered(&items, |&i| i * 3);
        assert_eq!(seq, par);
    }
}

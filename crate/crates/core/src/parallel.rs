//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature the items run on the rayon pool; without it
//! they run sequentially. Callers are required to make each item independent
//! (own RNG stream, no shared mutable state), so both paths return identical
//! results and the output order always matches the input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn map_independent<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential counterpart kept unconditionally; benches compare the two.
pub fn map_independent_seq<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    F: Fn(I) -> O,
{
    items.into_iter().map(f).collect()
}

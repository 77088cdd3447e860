use rayon::ThreadPoolBuilder;

/// Runs `f` inside a dedicated rayon pool with `nthread` workers.
///
/// Every parallel section in the crate collects results in index order, so
/// the output does not depend on `nthread`.
pub fn with_threads<T: Send>(nthread: usize, f: impl FnOnce() -> T + Send) -> T {
    let nthread = nthread.max(1);
    match ThreadPoolBuilder::new().num_threads(nthread).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

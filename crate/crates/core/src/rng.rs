use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for substream `stream` of a named seed.
///
/// Every replicate (or chunk of replicates) draws from its own stream, so results do not
/// depend on how work is scheduled across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a (cell, replicate) coordinate into one stream id.
pub fn cell_stream(cell: usize, replicate: usize) -> u64 {
    ((cell as u64) << 32) | replicate as u64
}

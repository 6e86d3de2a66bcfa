use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams keyed by purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum Domain {
    Rubbing = 0x7275_6262,
    Font = 0x666f_6e74,
    FontDraw = 0x6664_7261,
    NegSubsample = 0x6e65_6773,
    Clustering = 0x636c_7573,
    Probe = 0x7072_6f62,
}

/// Generator for item `index` of `domain`, fully determined by `(seed, domain, index)`.
pub(crate) fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).rotate_left(17));
    rng.set_stream(index);
    rng
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::generate::template;
use super::{recolor, BaseTexture, Palette, PATTERNS};
use crate::corpus::{Corpus, Description, Split, TextureImage};
use crate::Result;

/// A small seeded corpus of recolored procedural textures, every image in
/// the training split, each with a templated description and a short
/// phrase list.
pub fn demo_corpus(count: usize, size: u32, seed: u64) -> Result<Corpus> {
    let palette = Palette::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut descs = Vec::with_capacity(2 * count);
    for i in 0..count {
        let pattern = PATTERNS[rng.random_range(0..PATTERNS.len())];
        let base = BaseTexture::procedural(pattern, size, rng.random_range(0..1000))?;
        let a = rng.random_range(0..palette.len());
        let mut b = rng.random_range(0..palette.len() - 1);
        if b >= a {
            b += 1;
        }
        let (ca, cb) = (&palette.colors[a], &palette.colors[b]);
        let id = format!("demo{i:04}");
        images.push(TextureImage::in_memory(&id, pattern, Split::Train, recolor(&base, ca.rgb, cb.rgb)));
        descs.extend(Description::parse(&id, &template(base.kind, pattern, &ca.name, &cb.name)));
        descs.extend(Description::parse(&id, &format!("{pattern}, {}, {}", ca.name, cb.name)));
    }
    Corpus::new(images, descs)
}

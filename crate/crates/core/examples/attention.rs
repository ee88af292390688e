//! Decoupled cross-attention: direction-prompt features plus image features
//! scaled by the guidance weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texsync::guidance::{cross_attention, decoupled_attention, AttentionWeights, FeatureOrigin, FeatureSeq};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (queries, d_z, d, d_k) = (16, 32, 24, 8);
    let z = texsync::guidance::random_matrix(queries, d_z, &mut rng);
    let c_view = FeatureSeq::random(77, d, FeatureOrigin::Text, &mut rng);
    let c_img = FeatureSeq::random(4, d, FeatureOrigin::Image, &mut rng);
    let w = AttentionWeights::random(d_z, d, d_k, &mut rng);

    let text_only = cross_attention(&z, &c_view, &w.w_q, &w.w_k, &w.w_v)?;
    let image_only = cross_attention(&z, &c_img, &w.w_q, &w.w_k_img, &w.w_v_img)?;
    for lambda in [0.0, 0.3, 0.6, 1.0] {
        let out = decoupled_attention(&z, &c_view, &c_img, lambda, &w)?;
        let residual = (&out - &text_only - &image_only * lambda).amax();
        println!(
            "lambda {lambda:.1}: |out - text| {:.4}  residual vs text + lambda*image {residual:.1e}",
            (&out - &text_only).norm()
        );
    }
    Ok(())
}

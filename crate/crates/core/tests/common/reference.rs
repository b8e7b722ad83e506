//! Reference recall metrics at H=10 for the sixteen pairings, with their
//! average ranks, in table order.

use memstream::eval::MetricRow;
use memstream::inject::InjectorKind;
use memstream::memory::EncoderKind;

/// `(ssim, lpips, img_mse, latent_mse, cycle_mse, recon_rank, latent_rank)`.
type Row = (f64, f64, f64, f64, f64, f64, f64);

pub const TABLE: [(EncoderKind, InjectorKind, Row); 16] = {
    use EncoderKind::*;
    use InjectorKind::{AdaNorm, Additive, CrossAttention, Lora, Prepend};
    [
        (None, InjectorKind::None, (0.6995, 0.2962, 0.0376, 1.373, 1.802, 8.667, 11.0)),
        (Cache, Prepend, (0.8195, 0.1891, 0.0109, 0.7971, 1.123, 1.0, 1.0)),
        (Cache, Additive, (0.7145, 0.2791, 0.035, 1.312, 1.703, 4.667, 7.5)),
        (Cache, CrossAttention, (0.7226, 0.2912, 0.0369, 1.43, 1.657, 5.667, 8.0)),
        (Cache, AdaNorm, (0.6841, 0.2913, 0.0427, 1.574, 1.937, 9.333, 14.0)),
        (Cache, Lora, (0.6706, 0.2955, 0.0479, 1.596, 2.048, 12.33, 15.5)),
        (Ssm, Prepend, (0.7485, 0.2704, 0.0307, 1.368, 1.515, 3.0, 5.0)),
        (Ssm, Additive, (0.6913, 0.3078, 0.0453, 1.456, 1.681, 11.0, 10.0)),
        (Ssm, CrossAttention, (0.7258, 0.234, 0.0601, 1.369, 1.586, 7.0, 6.0)),
        (Ssm, AdaNorm, (0.6818, 0.3059, 0.0476, 1.369, 1.694, 12.33, 9.0)),
        (Ssm, Lora, (0.6757, 0.2955, 0.0457, 1.507, 2.01, 11.33, 14.0)),
        (Titans, Prepend, (0.6594, 0.309, 0.053, 1.478, 2.058, 15.0, 14.5)),
        (Titans, Additive, (0.6965, 0.2632, 0.0566, 1.341, 1.666, 9.0, 6.5)),
        (Titans, CrossAttention, (0.7079, 0.2902, 0.0351, 1.287, 1.765, 6.0, 7.0)),
        (Titans, AdaNorm, (0.6599, 0.3155, 0.0461, 1.297, 1.658, 14.0, 5.0)),
        (Titans, Lora, (0.7119, 0.2655, 0.0384, 1.185, 1.43, 5.667, 2.0)),
    ]
};

pub fn rows() -> Vec<MetricRow> {
    TABLE
        .iter()
        .map(|&(encoder, injector, (ssim, lpips, img_mse, latent_mse, cycle_mse, _, _))| MetricRow {
            encoder,
            injector,
            ssim,
            lpips: Some(lpips),
            img_mse,
            latent_mse,
            cycle_mse,
        })
        .collect()
}

pub fn reference_ranks() -> Vec<(f64, f64)> {
    TABLE.iter().map(|&(_, _, p)| (p.5, p.6)).collect()
}

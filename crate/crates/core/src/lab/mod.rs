//! Synthetic real and fake corpora plus the perturbation generators.

pub mod perturb;
pub mod synth;

pub use perturb::{
    add_noise, blur, blur_sigma, compress_sim, fgsm, gaussian_kernel, perturb_all, quant_table,
    PerturbKind, PerturbSpec,
};
pub use synth::{blockify, derive_seed, gen_synthetic, generate_one, SynthKind, SynthSpec};

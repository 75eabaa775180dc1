//! Raw codebook, integrated transforms, cached transformed codebook and
//! brute-force nearest-neighbor search.

mod cache;
mod init;
mod io;
mod search;
mod transform;

pub use cache::{refresh_cache, TransformedCache};
pub use init::{init_gaussian, init_kmeans, kmeans, CodebookInit, CodebookState, KMeans};
pub use io::{
    codebook_envelope, codebook_from_envelope, load_codebook, save_codebook, write_json, Envelope,
    CODEBOOK_KIND, ENVELOPE_VERSION,
};
pub use search::{batch_nn, nn_query, Assignment};
pub use transform::{
    apply_transform, build_top_k, clip_in_place, spectral_clip, transform_forward, TopKMixer,
    TransformConfig, TransformForward, TransformInit, TransformKind, TransformSpec,
    DEFAULT_NORM_TEMP, DEFAULT_RANK, DEFAULT_TAU_W, DEFAULT_TEMP, DEFAULT_TOP_K, DENSE_MIXER_MAX_K,
};

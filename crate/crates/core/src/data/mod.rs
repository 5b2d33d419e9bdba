//! Domain datasets, preprocessing, mixing and the synthetic benchmark.

mod io;
mod mix;
mod preprocess;
mod sample;
mod synthetic;

pub use io::{load_dataset, write_dataset};
pub use mix::{shuffle_select, Draw, MixDraws, MixRatio, MixSpec, MixStream, Prefetch};
pub use preprocess::{preprocess, proximity_resize, PreprocessSpec, PreprocessStep};
pub use sample::{collate, ClassMap, Domain, DomainDataset, Image, Mask, Sample, IGNORE_LABEL};
pub use synthetic::{
    generate_domain, make_synthetic_domains, make_synthetic_validation, SceneStyle, SyntheticConfig, SHADOW_TAG,
};

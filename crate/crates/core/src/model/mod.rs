pub mod arch;
pub mod checkpoint;
pub mod network;
pub mod profile;
pub mod weights;

pub use arch::{
    gcd, resnet50_extractor, segmentation_head, tiny_extractor, tiny_head, ArchitectureSpec, GroupRule, StageOp, StageSpec,
};
pub use checkpoint::{Checkpoint, Provenance};
pub use network::{
    build_constructed_teacher, build_student, build_student_with_rule, build_teacher, init_teacher, FeatureMap,
    NetworkPartition, Role, STUDENT_GROUP_RULE,
};
pub use profile::{profile_specs, ModelProfile, StageProfile};
pub use weights::{ModelWeights, PartitionLabel, WeightEntry};

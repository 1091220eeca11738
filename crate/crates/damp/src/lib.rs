//! Desk-scale laboratory for doubly aligned multilingual semantic parsing:
//! a pointer-generator parser over synthetic pseudo-languages, contrastive
//! alignment pretraining, and constrained adversarial alignment finetuning.

pub mod adversarial;
pub mod align_pretrain;
pub mod autodiff;
pub mod evalprobe;
pub mod experiment;
pub mod parsefmt;
pub mod model;
pub mod synthdata;
pub mod rng;

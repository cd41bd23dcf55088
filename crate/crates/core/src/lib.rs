//! Duplicate-free join projection `Π_{x,z}(R(x,y) ⋈_y S(z,y))` with
//! density-adaptive kernels.
//!
//! The engine picks between a hash join with hash deduplication and a hybrid
//! plan over dictionary-encoded inputs. The hybrid plan splits `S` by `z`
//! into a sparse part (joined by a CSR Boolean matrix product with a stamped
//! sparse accumulator) and a dense part (bit panels checked with early exit).
//! Because the split is by whole `z` columns the two outputs never overlap and
//! are concatenated without a final dedup pass.
//!
//! ```
//! use dim3::{join_project, CostConstants, EngineConfig, RawTable};
//!
//! let r = RawTable::from_pairs(&[(0, 0), (0, 1), (1, 1)]);
//! let s = RawTable::from_pairs(&[(0, 0), (0, 1), (1, 1)]);
//! let result = join_project(&r, &s, &EngineConfig::default(), &CostConstants::reference()).unwrap();
//! let mut pairs = result.raw_pairs();
//! pairs.sort();
//! assert_eq!(pairs.len(), 4);
//! ```

pub mod cache;
pub mod classical;
pub mod costmodel;
pub mod datagen;
pub mod denseec;
pub mod engine;
pub mod error;
pub mod hash;
pub mod mapping;
pub mod partition;
pub mod planner;
pub mod relation;
pub mod sink;
pub mod sparsebmm;

pub use costmodel::CostConstants;
pub use engine::{join_project, EngineConfig, ResultSet, Strategy};
pub use error::{Error, Result};
pub use relation::{RawTable, Value};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mapping.md")]
    mod mapping {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/caching.md")]
    mod caching {}
    #[doc = include_str!("../../../book/src/aggregates.md")]
    mod aggregates {}
    #[doc = include_str!("../../../book/src/planner.md")]
    mod planner {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! The cross-lingual connection: Decision Maker scoring, Gumbel-Softmax
//! layer selection, and first-layer fusion.

mod cc;
mod decision;
mod selector;

pub use cc::{
    cc_forward, cc_loss, fusion_vectors, CcLoss, ConnectionConfig, ConnectionNodes, EnglishSource,
    FusionVectors, SelectionRecord, SelectionSettings, FUSION_LAYER,
};
pub use decision::{
    combine_decision_logits, decision_logits, fuse_first_layer, gumbel_from_uniform,
    gumbel_softmax_select, gumbel_softmax_weights, sample_gumbel, DecisionMaker, LayerChoice,
    SelectionMode,
};
pub use selector::{
    DecisionMakerSelector, LayerSelector, MeanPooling, RandomPooling, Selection, SelectionInput,
    SelectorFactory, SelectorRegistry,
};

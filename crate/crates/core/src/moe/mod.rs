//! Sparse MoE transformer: layouts, routing, expert layers and parameter
//! accounting.

pub mod accounting;
pub mod config;
pub mod layer;
pub mod routing;

pub use accounting::{count_parameters, dense_decoder_params, format_billions, CountSpec, ParamCount};
pub use config::{build_layer_layout, LayerLayout, ModelConfig, MoeLayout};
pub use layer::{combine_slots, moe_forward, ExpertBackend, ExpertFfn, LocalExperts};
pub use routing::{aux_balance_loss, aux_balance_loss_graph, route, route_graph, select_topk, RoutedVars, RoutingDecision};

//! Networks: the frozen base language model, the LSTM adapter, and the
//! selector and critic heads over adapter features.

mod cursor;
mod model;
mod params;

pub use cursor::{base_lm_values, mlp_values, Cursor, StepValues};
pub use model::{
    adapter_forward, adapter_step_values, adapter_zero_carry, base_lm_forward, critic_head,
    selector_head, trace, Carry, HiddenTrace, LstmState, ModelState, Session, StepVars,
};
pub use params::{
    init_all, Dims, Param, ParamStore, ADAPTER_PREFIX, CRITIC_PREFIX, LM_PREFIX, SELECTOR_PREFIX,
};

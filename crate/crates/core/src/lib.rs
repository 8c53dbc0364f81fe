//! Run LLM workflows as state machines: states run ordered output functions
//! (model agents, tools, static prompts) that append to a shared context
//! history, and rule tables over that history pick the next state.

pub mod backend;
pub mod env;
pub mod eval;
pub mod fixtures;
pub mod flow;
pub mod flowdef;
pub mod output;
pub mod reflexion;
pub mod trace;
pub mod transition;

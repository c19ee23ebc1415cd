//! Community energy storage trading: battery model, per-slot trading game,
//! operator optimisation and the participation game on top of it.

pub mod participation;
pub mod qp;
pub mod scenario;
pub mod slot_game;
pub mod stackelberg;
pub mod storage;
pub mod synthetic;

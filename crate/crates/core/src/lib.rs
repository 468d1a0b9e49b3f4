pub mod autodiff;
pub mod relax;
pub mod data;
pub mod net;
pub mod controller;
pub mod cost;
pub mod pipeline;
pub mod harness;

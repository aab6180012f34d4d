pub mod io;
pub mod network;
pub mod checkpoint;
pub mod trainer;
pub mod predict;
pub mod service;

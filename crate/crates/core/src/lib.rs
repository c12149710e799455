pub mod cascade;
pub mod dcflow;
pub mod equilibria;
pub mod io;
pub mod netmodel;
pub mod primaldual;
pub mod qp;
pub mod studies;
pub mod topology;

pub mod cnf;
pub mod energy;
pub mod fm;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod symspace;

//! Linear programming engines shared by the solvers.

pub(crate) mod bipartite;
pub(crate) mod hungarian;
pub(crate) mod simplex;
pub(crate) mod transport;

pub(crate) use simplex::{minimize, Cmp, ColumnSource, LpBuilder, LpStatus};
pub(crate) use transport::solve_transport;

pub mod geometry;
pub mod lip;
pub mod masks;
pub mod c3m;
pub mod pnp;
pub mod io;
pub mod pipeline;

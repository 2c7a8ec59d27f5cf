//! Co-adapted couplings of reflected Brownian motion in bounded convex
//! domains: simulation, coupling strategies and Lyapunov certificates that
//! rule out shy couplings.

pub mod certificates;
pub mod dynamics;
pub mod geometry;
pub mod montecarlo;
pub mod strategies;

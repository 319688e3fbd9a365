//! Reaction-diffusion control: a finite element SIS/heat simulator wrapped
//! as an episodic environment, a policy-gradient agent that sets regional
//! diffusivities, and a socket protocol that runs the two in separate
//! processes.

pub mod env;
pub mod fem;
pub mod mesh;
pub mod policy;
pub mod proto;
pub mod trace;

pub use env::{EnvConfig, EnvHandle, Environment, Observation};
pub use fem::{ControlMap, Field, SimParams, Simulator};
pub use mesh::Mesh;

pub mod constitutive;
pub mod design_search;
pub mod fem_solver;
pub mod lattice_graph;
pub mod mesh_forge;
pub mod sparse;
pub mod world_env;

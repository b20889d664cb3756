//! Shapes, synthetic data, surface sampling, contour extraction and
//! point-set metrics.

pub mod assignment;
pub mod dataset;
pub mod grid;
pub mod io;
pub mod marching;
pub mod mesh;
pub mod metrics;
pub mod shape;

pub use assignment::min_cost_assignment;
pub use dataset::{
    generate_box_dataset, generate_box_dataset_sized, load_dataset, save_dataset, DatasetEntry,
    DatasetIndex, ShapeRecord,
};
pub use grid::ScalarGrid;
pub use marching::marching_extract;
pub use mesh::{add_vertex_noise, box_mesh, sample_surface, PointCloud, ShapeMesh, SurfaceSample};
pub use metrics::{chamfer_distance, earth_mover_distance};
pub use shape::{
    occupancy_primitive, rotation_2d, rotation_from_quaternion, sdf_primitive, Domain, ShapeKind,
    ShapeSpec, SignConvention,
};

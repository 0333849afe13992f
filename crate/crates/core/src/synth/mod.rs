//! Synthetic clip generator: layered 2-D scenes with analytic motion, an
//! exact rasterizer, trajectory rendering with occlusion, semantic stand-in
//! features, prompt-driven segmentation oracles, and the on-disk scene
//! directory format.

pub mod io;
pub mod oracle;
pub mod render;
pub mod scene;

pub use io::{generate_bundle, load_scene_dir, save_scene_dir, SceneBundle};
pub use oracle::{oracle_segment, oracle_segment_video, DegradationOpts, VideoPrompt};
pub use render::{
    anchor_at, anchor_position, anchor_visible, cosine, dynamic_mask_video, rasterize_all,
    rasterize_id_map, render_tracks, semantic_features, SemanticFeatures, TrackAnchor,
};
pub use scene::{
    generate_scene, MotionProgram, Scene, SceneConfig, SceneObject, Shape, Similarity,
};

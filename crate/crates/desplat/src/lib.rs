//! IO, file formats, and run orchestration around `desplat-core`: splat PLY
//! scenes, PPM images, camera lists, flat-text run configs with manifest
//! echo, checkpoints, and the subcommand implementations used by the CLI.

pub mod cameras;
pub mod checkpoint;
pub mod config;
pub mod logs;
pub mod ply;
pub mod ppm;
pub mod runs;
pub mod threads;

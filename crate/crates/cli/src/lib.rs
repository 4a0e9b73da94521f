pub mod archive;
pub mod commands;
pub mod config;
pub mod verify;

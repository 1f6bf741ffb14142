pub mod client;
pub mod config;
pub mod dpu;
pub mod ebpf;
pub mod kv;
pub mod nvme;
pub mod pipeline;
pub mod programs;
pub mod server;
pub mod sim;
pub mod slot;
pub mod wire;

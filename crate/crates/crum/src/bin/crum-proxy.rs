//! Proxy daemon: owns the device session and serves forwarded calls over
//! the shared control region until shutdown or teardown.

use clap::Parser;

use crum::device;
use crum::proxy::{ExitReason, Proxy};
use crum::wire::shm::SharedRegion;
use crum::wire::{DEFAULT_RING_SLOTS, DEFAULT_SCRATCH_BYTES};

#[derive(Parser)]
#[command(name = "crum-proxy", about = "device proxy daemon")]
struct Args {
    /// Name of the shared control region to create (e.g. /crum-1234).
    #[arg(long)]
    shm: String,
    /// Device arena capacity in bytes.
    #[arg(long, default_value_t = 1 << 30)]
    arena: usize,
    /// Ring slot count (power of two).
    #[arg(long, default_value_t = DEFAULT_RING_SLOTS)]
    ring_slots: u32,
}

fn main() {
    let args = Args::parse();
    let device = match device::device_init(args.arena) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("ERR device-init {e}");
            std::process::exit(1);
        }
    };
    let region = match SharedRegion::create(&args.shm, args.ring_slots, DEFAULT_SCRATCH_BYTES as u32)
    {
        Ok(r) => std::sync::Arc::new(r),
        Err(e) => {
            eprintln!("ERR shm-create {e}");
            std::process::exit(1);
        }
    };
    let mut proxy = Proxy::new(region, device);
    match proxy.run() {
        ExitReason::Clean => std::process::exit(0),
        ExitReason::Protocol => {
            eprintln!("ERR protocol");
            std::process::exit(2);
        }
        ExitReason::TornDown => {
            eprintln!("ERR torn-down");
            std::process::exit(3);
        }
    }
}

//! Workload runner: attaches to the session named by CRUM_SHM_NAME (after a
//! restore if CRUM_RESTART is set), runs one bundled workload, and prints a
//! machine-parsable FINAL line.

use clap::Parser;

use crum::client::Session;
use crum::error::CrumError;
use crum::workloads::{self, Workload};

#[derive(Parser)]
#[command(name = "crum-app", about = "bundled benchmark workloads")]
struct Args {
    /// Workload spec, e.g. dotprod:bytes=64m or redundant:r=0.5,bytes=32m.
    workload: String,
    #[arg(long, default_value_t = 10)]
    iters: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() {
    let args = Args::parse();
    let Some(w) = Workload::parse(&args.workload) else {
        eprintln!("ERR bad-workload {}", args.workload);
        std::process::exit(1);
    };
    let mut session = match Session::attach() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ERR attach {e}");
            std::process::exit(1);
        }
    };
    match workloads::run(&mut session, &w, args.seed, args.iters) {
        Ok(out) => {
            println!("FINAL {} {:08x}", w.name(), out.checksum);
            if let Err(e) = session.shutdown() {
                eprintln!("ERR shutdown {e}");
                std::process::exit(1);
            }
        }
        Err(CrumError::CycleViolation { region, page }) => {
            eprintln!("ERR cycle-violation region={region} page={page}");
            std::process::exit(4);
        }
        Err(e) => {
            eprintln!("ERR workload {e}");
            std::process::exit(1);
        }
    }
}

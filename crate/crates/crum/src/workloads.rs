//! Bundled benchmark workloads. All of them are seeded and deterministic,
//! and all are safe to checkpoint at any API call boundary: every iteration
//! starts by re-initializing its scratch regions (`fill`), so replaying a
//! partially-captured iteration converges to the same state, and the
//! host-side fold (iteration counter + accumulator) travels in the app-state
//! blob, updated between API calls where no checkpoint can intervene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{ReplayOp, Session};
use crate::error::{CrumError, CrumResult};

#[derive(Debug, Clone)]
pub enum Workload {
    /// Two managed vectors, repeated dot products. `redundancy` is the
    /// fraction of constant (compressible) elements; plain dotprod is 0.0.
    DotProd { bytes: usize, redundancy: f64 },
    /// Many short kernels over many small (12–128 KB) regions.
    TinyKer { regions: usize, kernels: u64 },
    /// Few large regions, a handful of kernels per iteration.
    BigReg { bytes: usize },
    /// Breaks the call/read/write cycle on purpose: write one page, read a
    /// different page of the same region with no device call in between.
    Violator,
}

impl Workload {
    /// Parses `name[:key=val,...]`, e.g. `redundant:r=0.5,bytes=16777216`.
    pub fn parse(spec: &str) -> Option<Workload> {
        let (name, rest) = match spec.split_once(':') {
            Some((n, r)) => (n, r),
            None => (spec, ""),
        };
        let mut bytes = None;
        let mut r = None;
        let mut regions = None;
        let mut kernels = None;
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=')?;
            match k {
                "bytes" => bytes = Some(parse_bytes(v)?),
                "r" => r = Some(v.parse().ok()?),
                "regions" => regions = Some(v.parse().ok()?),
                "kernels" => kernels = Some(v.parse().ok()?),
                _ => return None,
            }
        }
        Some(match name {
            "dotprod" => Workload::DotProd {
                bytes: bytes.unwrap_or(512 * 1024 * 1024),
                redundancy: 0.0,
            },
            "redundant" => Workload::DotProd {
                bytes: bytes.unwrap_or(512 * 1024 * 1024),
                redundancy: r.unwrap_or(0.5),
            },
            "tinyker" => Workload::TinyKer {
                regions: regions.unwrap_or(64),
                kernels: kernels.unwrap_or(2000),
            },
            "bigreg" => Workload::BigReg {
                bytes: bytes.unwrap_or(64 * 1024 * 1024),
            },
            "violator" => Workload::Violator,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Workload::DotProd { redundancy, .. } if *redundancy > 0.0 => "redundant",
            Workload::DotProd { .. } => "dotprod",
            Workload::TinyKer { .. } => "tinyker",
            Workload::BigReg { .. } => "bigreg",
            Workload::Violator => "violator",
        }
    }

    /// Managed bytes the workload will allocate; sizes the proxy arena.
    pub fn managed_bytes(&self) -> usize {
        match *self {
            Workload::DotProd { bytes, .. } => bytes + 4096,
            Workload::TinyKer { regions, .. } => regions * 128 * 1024,
            Workload::BigReg { bytes } => 2 * bytes + 4096,
            Workload::Violator => 4 * 4096,
        }
    }
}

/// Accepts `16m`, `4k`, `1g`, or plain byte counts.
fn parse_bytes(s: &str) -> Option<usize> {
    let (digits, mult) = match s.as_bytes().last()? {
        b'k' | b'K' => (&s[..s.len() - 1], 1024),
        b'm' | b'M' => (&s[..s.len() - 1], 1024 * 1024),
        b'g' | b'G' => (&s[..s.len() - 1], 1024 * 1024 * 1024),
        _ => (s, 1),
    };
    digits.parse::<usize>().ok().map(|n| n * mult)
}

#[derive(Debug, Clone, Copy)]
pub struct Outcome {
    /// CRC32 over the final managed-region bytes, folded with the host
    /// accumulator — the value golden-run comparisons use.
    pub checksum: u32,
    pub kernels_launched: u64,
    pub iterations_run: u64,
}

/// (iteration counter, host accumulator) carried in the app-state blob.
fn decode_fold(blob: &[u8]) -> (u64, f64) {
    if blob.len() != 16 {
        return (0, 0.0);
    }
    (
        u64::from_le_bytes(blob[0..8].try_into().unwrap()),
        f64::from_le_bytes(blob[8..16].try_into().unwrap()),
    )
}

fn encode_fold(iter: u64, acc: f64) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[0..8].copy_from_slice(&iter.to_le_bytes());
    b[8..16].copy_from_slice(&acc.to_le_bytes());
    b
}

/// Managed allocations, resumable: a fresh session allocates and host-seeds;
/// a restored one recovers shadow addresses from the replay log (payloads
/// came back with the image, so seeding is skipped).
fn ensure_regions(
    s: &mut Session,
    lens: &[usize],
    seed: impl Fn(usize, &mut [u8]),
) -> CrumResult<Vec<(usize, u64)>> {
    if s.replay_log().ops.is_empty() {
        let mut out = Vec::with_capacity(lens.len());
        for (i, &len) in lens.iter().enumerate() {
            let shadow = s.malloc_managed(len)?;
            let buf = unsafe { std::slice::from_raw_parts_mut(shadow as *mut u8, len) };
            seed(i, buf);
            out.push((shadow, s.region_id(shadow)?));
        }
        return Ok(out);
    }
    let mut out = Vec::new();
    for op in &s.replay_log().ops {
        if let ReplayOp::MallocManaged {
            len,
            region,
            shadow,
            ..
        } = *op
        {
            out.push((shadow as usize, region));
            let want = lens.get(out.len() - 1).copied();
            if want != Some(len as usize) {
                return Err(CrumError::RestoreFailed(format!(
                    "restored region {} has {} bytes, workload expects {:?}",
                    region, len, want
                )));
            }
        }
    }
    if out.len() != lens.len() {
        return Err(CrumError::RestoreFailed(format!(
            "restored {} managed regions, workload expects {}",
            out.len(),
            lens.len()
        )));
    }
    Ok(out)
}

fn ensure_stream(s: &mut Session) -> CrumResult<u64> {
    for op in &s.replay_log().ops {
        if let ReplayOp::StreamCreate { stream } = *op {
            return Ok(stream);
        }
    }
    s.stream_create()
}

fn read_out_f32(addr: usize) -> f32 {
    unsafe { std::ptr::read_volatile(addr as *const f32) }
}

fn crc_regions(regions: &[(usize, u64)], lens: &[usize]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (&(shadow, _), &len) in regions.iter().zip(lens) {
        h.update(unsafe { std::slice::from_raw_parts(shadow as *const u8, len) });
    }
    h.finalize()
}

pub fn run(s: &mut Session, w: &Workload, seed: u64, iters: u64) -> CrumResult<Outcome> {
    match *w {
        Workload::DotProd { bytes, redundancy } => dotprod(s, bytes, redundancy, seed, iters),
        Workload::TinyKer { regions, kernels } => tinyker(s, regions, kernels, seed, iters),
        Workload::BigReg { bytes } => bigreg(s, bytes, seed, iters),
        Workload::Violator => violator(s),
    }
}

fn dotprod(
    s: &mut Session,
    bytes: usize,
    redundancy: f64,
    seed: u64,
    iters: u64,
) -> CrumResult<Outcome> {
    let vec_bytes = ((bytes / 2) & !4095).max(4096);
    let lens = [vec_bytes, vec_bytes, 4096];
    let regions = ensure_regions(s, &lens, |i, buf| {
        if i == 2 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1));
        for lane in buf.chunks_exact_mut(4) {
            let v: f32 = if rng.gen::<f64>() < redundancy {
                1.0
            } else {
                rng.gen::<f32>() - 0.5
            };
            lane.copy_from_slice(&v.to_le_bytes());
        }
    })?;
    let stream = ensure_stream(s)?;
    let (start, mut acc) = decode_fold(s.app_state());
    let mut kernels = 0u64;
    for i in start..iters {
        s.launch(
            stream,
            "dot",
            &[regions[0].1, regions[1].1, regions[2].1],
            &[],
        )?;
        s.synchronize()?;
        kernels += 1;
        acc += read_out_f32(regions[2].0) as f64 * (i + 1) as f64;
        s.set_app_state(&encode_fold(i + 1, acc));
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&acc.to_bits().to_le_bytes());
    h.update(&crc_regions(&regions, &lens).to_le_bytes());
    Ok(Outcome {
        checksum: h.finalize(),
        kernels_launched: kernels,
        iterations_run: iters - start,
    })
}

fn tinyker(
    s: &mut Session,
    region_count: usize,
    kernel_budget: u64,
    seed: u64,
    _iters: u64,
) -> CrumResult<Outcome> {
    // Region sizes cycle through 12–128 KB, seeded.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens: Vec<usize> = (0..region_count)
        .map(|_| {
            let kb = rng.gen_range(3..=32) * 4;
            kb * 1024
        })
        .collect();
    let regions = ensure_regions(s, &lens, |_, buf| buf.fill(0))?;
    let stream = ensure_stream(s)?;
    let (start, mut acc) = decode_fold(s.app_state());
    let mut kernels = 0u64;
    let per_iter = 2 * region_count as u64;
    let iters = kernel_budget.div_ceil(per_iter);
    for i in start..iters {
        for (j, &(_, rid)) in regions.iter().enumerate() {
            let v = ((i * 31 + j as u64 * 7) % 97) as f32 * 0.25;
            s.launch(stream, "fill", &[rid], &[v.to_bits() as u64])?;
            // Chained onto the fill of the same target, so replaying a
            // half-captured iteration still converges.
            let src = regions[(j + 1) % region_count].1;
            s.launch(stream, "saxpy", &[src, rid], &[0.5f32.to_bits() as u64])?;
        }
        s.synchronize()?;
        kernels += per_iter;
        acc += read_out_f32(regions[0].0) as f64;
        s.set_app_state(&encode_fold(i + 1, acc));
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&acc.to_bits().to_le_bytes());
    h.update(&crc_regions(&regions, &lens).to_le_bytes());
    Ok(Outcome {
        checksum: h.finalize(),
        kernels_launched: kernels,
        iterations_run: iters - start,
    })
}

fn bigreg(s: &mut Session, bytes: usize, seed: u64, iters: u64) -> CrumResult<Outcome> {
    let lens = [bytes, bytes, 4096];
    let regions = ensure_regions(s, &lens, |i, buf| {
        if i != 0 {
            buf.fill(0);
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lane in buf.chunks_exact_mut(4) {
            lane.copy_from_slice(&(rng.gen::<f32>() - 0.5).to_le_bytes());
        }
    })?;
    let stream = ensure_stream(s)?;
    let (a, b, out) = (regions[0].1, regions[1].1, regions[2].1);
    let (start, mut acc) = decode_fold(s.app_state());
    let mut kernels = 0u64;
    for i in start..iters {
        let c = ((i * 13 + 5) % 41) as f32 * 0.125;
        let scale = 1.0 + (i % 7) as f32 * 0.25;
        s.launch(stream, "fill", &[b], &[c.to_bits() as u64])?;
        s.launch(stream, "saxpy", &[a, b], &[scale.to_bits() as u64])?;
        s.launch(stream, "dot", &[a, b, out], &[])?;
        s.synchronize()?;
        kernels += 3;
        acc = acc * 0.5 + read_out_f32(regions[2].0) as f64;
        s.set_app_state(&encode_fold(i + 1, acc));
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&acc.to_bits().to_le_bytes());
    h.update(&crc_regions(&regions, &lens).to_le_bytes());
    Ok(Outcome {
        checksum: h.finalize(),
        kernels_launched: kernels,
        iterations_run: iters - start,
    })
}

fn violator(s: &mut Session) -> CrumResult<Outcome> {
    let page = 4096usize;
    let a = s.malloc_managed(4 * page)?;
    let stream = s.stream_create()?;
    let ra = s.region_id(a)?;
    s.launch(stream, "fill", &[ra], &[1.0f32.to_bits() as u64])?;
    s.synchronize()?;
    // The violation: write page 0, then read page 2 with no device call in
    // between. Verified mode flags this at the next API call; normal mode
    // proceeds.
    unsafe { std::ptr::write_volatile(a as *mut u8, 9) };
    let observed = unsafe { std::ptr::read_volatile((a + 2 * page) as *const u8) };
    s.synchronize()?;
    let mut h = crc32fast::Hasher::new();
    h.update(&[observed]);
    h.update(unsafe { std::slice::from_raw_parts(a as *const u8, 4 * page) });
    Ok(Outcome {
        checksum: h.finalize(),
        kernels_launched: 1,
        iterations_run: 1,
    })
}

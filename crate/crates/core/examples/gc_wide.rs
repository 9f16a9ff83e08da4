use hts_core::gradcheck::check_blocks;
use hts_core::rng::RngState;
fn main() {
    let t0 = std::time::Instant::now();
    let reports = check_blocks(RngState::new(7), 16, 1e-4).unwrap();
    for r in &reports {
        println!("{}: {:.3e} ({} coords, worst {})", r.block, r.max_rel_err, r.coords_checked, r.worst_param);
    }
    println!("elapsed {:?}", t0.elapsed());
}

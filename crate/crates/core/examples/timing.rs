fn main() {
    let t0 = std::time::Instant::now();
    let cfg = tblab_core::config::RunConfig::default();
    let report = tblab_core::pipeline::run_pipeline(&cfg).unwrap();
    println!("elapsed: {:?}", t0.elapsed());
    for line in report.summary_lines() {
        println!("{line}");
    }
    println!("passed: {}", report.passed);
}

use phasekd_core::distill::*;
use phasekd_core::losses::*;
use phasekd_core::models::Scale;
use phasekd_core::synthdata::*;
use std::time::Instant;

fn cal_data() -> Dataset {
    let dir = std::path::Path::new("/tmp/phasekd-cal/data");
    if !dir.join("manifest.txt").exists() {
        std::fs::create_dir_all(dir).unwrap();
        generate_dataset(512, 128, &default_train_domains(), &default_test_domains(), dir, 7).unwrap();
    }
    load_dataset(dir).unwrap()
}

#[test]
#[ignore]
fn senior_teacher_comparison() {
    let data = cal_data();
    let trainer = Trainer::new(&data, "/tmp/phasekd-cal/work");
    for seed in [0u64, 1] {
        let t0 = Instant::now();
        let (senior, slog) = trainer.scratch(Scale::Senior, seed).unwrap();
        let sf = slog.final_eval().unwrap();
        eprintln!("s{seed} senior scratch {:.0}s ap50 {:.3}", t0.elapsed().as_secs_f64(), sf.ap50);

        let (_, tlog) = trainer.scratch(Scale::Tiny, seed).unwrap();
        eprintln!("s{seed} tiny scratch  ap50 {:.3}", tlog.final_eval().unwrap().ap50);

        for (name, kind) in [("mse", DistillKind::FeatureMse), ("fft", DistillKind::SpectralPhase)] {
            let loss = DistillLossConfig { kind, ..Default::default() };
            let t0 = Instant::now();
            let (_, log) = trainer.distill(&senior, Scale::Tiny, &loss, seed, 32, "st").unwrap();
            let f = log.final_eval().unwrap();
            let kd0 = &log.records[0].kd;
            let kdl = &log.records.last().unwrap().kd;
            eprintln!(
                "s{seed} senior->tiny {name} {:.0}s ap50 {:.3} map {:.3} | kd0 [{:.3} {:.3} {:.3}] kdN [{:.3} {:.3} {:.3}] task0 {:.2}",
                t0.elapsed().as_secs_f64(), f.ap50, f.map, kd0[0], kd0[1], kd0[2], kdl[0], kdl[1], kdl[2], log.records[0].loss_task
            );
        }
    }
}

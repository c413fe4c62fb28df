//! Scratch calibration harness (not part of the shipped surface).
//! Usage: calibrate sanity | calibrate al <budget> <base_channels> <seeds>

use std::time::Instant;

use alseg_core::acquisition::Acquisition;
use alseg_core::active_learning::{compare_acquisitions, ALConfig};
use alseg_core::nas::{evaluate_candidate, Candidate};
use alseg_core::net::{DropoutPlacement, NetConfig};
use alseg_core::synthdata::generate_dataset;

fn sanity(n_seeds: u64, encoder: &str) {
    let start = Instant::now();
    let ds = generate_dataset(250, 32, 100).unwrap();
    let (train, test) = ds.split_at(200);
    println!("dataset: {:?}", start.elapsed());
    let c = Candidate {
        encoder: encoder.into(),
        decoder: "dec-w1-skipon".into(),
        lr: 4e-4,
        batch_size: 4,
    };
    let mut collapsed = 0;
    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let stream = alseg_core::RngStream::new(seed, "calib");
        let iou = evaluate_candidate(&c, train, test, 30, &stream).unwrap();
        if iou < 0.5 {
            collapsed += 1;
            // replay the exact training call and dump its loss curve
            use alseg_core::net::{build_model, train as train_fn};
            let mut model =
                build_model(&c.net_config().unwrap(), &stream.with_tag("nas-init")).unwrap();
            let refs: Vec<&alseg_core::synthdata::Example> = train.iter().collect();
            let losses = train_fn(
                &mut model,
                &refs,
                30,
                c.lr,
                c.batch_size,
                &stream.with_tag("nas-train"),
            )
            .unwrap();
            let curve: Vec<String> = losses.iter().map(|l| format!("{l:.3}")).collect();
            println!("  losses: {}", curve.join(" "));
        }
        println!("seed {seed}: IOU {iou:.4} in {:?}", t0.elapsed());
    }
    println!("collapsed: {collapsed}/{n_seeds}");
}

/// Per-epoch loss/IOU trajectory for one seed (diagnostic: epoch-keyed
/// streams differ from a single train call, but the dynamics class is the
/// same).
fn trace(seed: u64) {
    use alseg_core::net::{build_model, train};
    use alseg_core::active_learning::evaluate_mean_iou;
    let ds = generate_dataset(250, 32, 100).unwrap();
    let (train_set, test) = ds.split_at(200);
    let c = Candidate {
        encoder: "enc-d3-c8".into(),
        decoder: "dec-w1-skipon".into(),
        lr: 4e-4,
        batch_size: 4,
    };
    let stream = alseg_core::RngStream::new(seed, "calib");
    let mut model = build_model(&c.net_config().unwrap(), &stream.with_tag("nas-init")).unwrap();
    let refs: Vec<&alseg_core::synthdata::Example> = train_set.iter().collect();
    for epoch in 0..30 {
        let loss = train(
            &mut model,
            &refs,
            1,
            c.lr,
            c.batch_size,
            &stream.with_tag("nas-train").with_phase(epoch),
        )
        .unwrap()[0];
        let iou = evaluate_mean_iou(&model, test).unwrap();
        // weight magnitude of the head kernel as an explosion indicator
        let head = model.param("head.w").unwrap();
        let wmax = head.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!("epoch {epoch}: loss {loss:.4} iou {iou:.4} head|w|max {wmax:.3}");
    }
}

fn al(budget: usize, base: usize, seeds: usize, base_seed: u64, batch: usize, lr: f64) {
    let start = Instant::now();
    let ds = generate_dataset(750, 32, 200).unwrap();
    let (pool, test) = ds.split_at(600);
    println!("dataset: {:?}", start.elapsed());
    let config = ALConfig {
        n_init: 20,
        k_per_phase: 10,
        epochs_per_phase: 15,
        t_passes: 10,
        acquisition: Acquisition::Mfe,
        iou_threshold: 1.0,
        label_budget: budget,
        net: NetConfig {
            encoder_depth: 3,
            base_channels: base,
            decoder_width_mult: 1,
            dropout_placement: DropoutPlacement::HeadOnly,
            dropout_rate: 0.5,
            num_classes: 2,
            skip_connections: true,
        },
        lr,
        batch_size: batch,
        seed: base_seed,
    };
    let t0 = Instant::now();
    let table = compare_acquisitions(
        &config,
        pool,
        test,
        &[Acquisition::Mfe, Acquisition::Random],
        seeds,
    )
    .unwrap();
    println!("compare: {:?}", t0.elapsed());
    for run in &table.runs {
        print!("{} seed {}:", run.acquisition, run.seed);
        for r in &run.reports {
            print!(" {}:{:.4}", r.labeled_count, r.test_iou);
        }
        println!();
        print!("  loss       :");
        for r in &run.reports {
            print!(" {}:{:.4}", r.labeled_count, r.train_loss_final);
        }
        println!();
    }
    for acq in [Acquisition::Mfe, Acquisition::Random] {
        let curve = table.mean_curve(acq).unwrap();
        print!("{acq} mean:");
        for p in &curve {
            print!(" {}:{:.4}", p.labeled_count, p.mean_iou);
        }
        println!();
    }
}

/// Full-data baseline for the efficiency analogue: train the segmentation
/// model on the entire 600-image pool for 15 epochs, per seed.
fn full(base: usize, seeds: u64, lr: f64) {
    use alseg_core::active_learning::evaluate_mean_iou;
    use alseg_core::net::{build_model, train};
    let ds = generate_dataset(750, 32, 200).unwrap();
    let (pool, test) = ds.split_at(600);
    let net = NetConfig {
        encoder_depth: 3,
        base_channels: base,
        decoder_width_mult: 1,
        dropout_placement: DropoutPlacement::None,
        dropout_rate: 0.5,
        num_classes: 2,
        skip_connections: true,
    };
    let refs: Vec<&alseg_core::synthdata::Example> = pool.iter().collect();
    let mut sum = 0.0;
    for seed in 900..900 + seeds {
        let t0 = Instant::now();
        let mut model =
            build_model(&net, &alseg_core::RngStream::new(seed, "init-seg").with_phase(0)).unwrap();
        train(
            &mut model,
            &refs,
            15,
            lr,
            4,
            &alseg_core::RngStream::new(seed, "train-seg").with_phase(0),
        )
        .unwrap();
        let iou = evaluate_mean_iou(&model, test).unwrap();
        sum += iou;
        println!("seed {seed}: full-data IOU {iou:.4} in {:?}", t0.elapsed());
    }
    println!("mean full-data IOU: {:.4}", sum / seeds as f64);
}

/// What does MFE select at phase 1? Prints the score/foreground-fraction
/// relation and the top-10 picks under each placement.
fn select(placement_label: &str) {
    use alseg_core::acquisition::{score_image, select_top_k};
    use alseg_core::active_learning::Pool;
    use alseg_core::net::{build_model, mc_inference, train};
    let placement = match placement_label {
        "head" => DropoutPlacement::HeadOnly,
        "decoder" => DropoutPlacement::FullDecoder,
        other => panic!("unknown placement {other}"),
    };
    let ds = generate_dataset(750, 32, 200).unwrap();
    let (pool_set, _test) = ds.split_at(600);
    let seed = 900u64;
    let pool = Pool::init(pool_set, 20, seed).unwrap();
    let net = NetConfig {
        encoder_depth: 3,
        base_channels: 4,
        decoder_width_mult: 1,
        dropout_placement: placement,
        dropout_rate: 0.5,
        num_classes: 2,
        skip_connections: true,
    };
    let labeled: Vec<&alseg_core::synthdata::Example> =
        pool.labeled().iter().map(|&id| &pool_set[id]).collect();
    let mut model =
        build_model(&net, &alseg_core::RngStream::new(seed, "init-unc").with_phase(1)).unwrap();
    train(
        &mut model,
        &labeled,
        15,
        4e-4,
        4,
        &alseg_core::RngStream::new(seed, "train-unc").with_phase(1),
    )
    .unwrap();

    let fg = |id: usize| -> f64 {
        let m = &pool_set[id].mask;
        m.iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64
    };
    // bbox fill ratio: round shapes fill ~0.6-0.79 of their bounding box,
    // thin rotated ones ~0.35-0.55, so lower = more elongated.
    let fill = |id: usize| -> f64 {
        let m = &pool_set[id].mask;
        let side = pool_set[id].side();
        let (mut x0, mut x1, mut y0, mut y1, mut n) = (side, 0usize, side, 0usize, 0usize);
        for y in 0..side {
            for x in 0..side {
                if m[y * side + x] == 1 {
                    n += 1;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if n == 0 {
            return 0.0;
        }
        n as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64
    };
    let mut scores = Vec::new();
    for &id in pool.unlabeled() {
        let stack = mc_inference(
            &model,
            &pool_set[id].image,
            10,
            &alseg_core::RngStream::new(seed, "mc-score").with_phase(1).with_item(id as u64),
        )
        .unwrap();
        scores.push(score_image(&stack, Acquisition::Mfe, id).unwrap());
    }
    // rank correlation proxy: mean fg fraction of top/bottom deciles
    let mut by_score = scores.clone();
    by_score.sort_by(|a, b| b.value.total_cmp(&a.value));
    let decile = by_score.len() / 10;
    let top_fg: f64 =
        by_score[..decile].iter().map(|s| fg(s.image_id)).sum::<f64>() / decile as f64;
    let bot_fg: f64 = by_score[by_score.len() - decile..]
        .iter()
        .map(|s| fg(s.image_id))
        .sum::<f64>()
        / decile as f64;
    let pool_fg: f64 =
        pool.unlabeled().iter().map(|&id| fg(id)).sum::<f64>() / pool.unlabeled().len() as f64;
    let top_fill: f64 =
        by_score[..decile].iter().map(|s| fill(s.image_id)).sum::<f64>() / decile as f64;
    let bot_fill: f64 = by_score[by_score.len() - decile..]
        .iter()
        .map(|s| fill(s.image_id))
        .sum::<f64>()
        / decile as f64;
    let pool_fill: f64 =
        pool.unlabeled().iter().map(|&id| fill(id)).sum::<f64>() / pool.unlabeled().len() as f64;
    println!("placement {placement_label}: pool mean fg {pool_fg:.3} fill {pool_fill:.3}");
    println!("  top-decile mean fg {top_fg:.3} fill {top_fill:.3}");
    println!("  bottom-decile mean fg {bot_fg:.3} fill {bot_fill:.3}");
    let picked = select_top_k(&scores, 10).unwrap();
    print!("  top-10 picks (id, fg, fill, score):");
    for id in picked {
        let s = scores.iter().find(|s| s.image_id == id).unwrap().value;
        print!(" ({id}, {:.3}, {:.3}, {s:.1})", fg(id), fill(id));
    }
    println!();
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("sanity") => sanity(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3),
            args.get(3).map(String::as_str).unwrap_or("enc-d3-c8"),
        ),
        Some("trace") => trace(args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0)),
        Some("al") => al(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1),
            args.get(5).and_then(|s| s.parse().ok()).unwrap_or(900),
            args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4),
            args.get(7).and_then(|s| s.parse().ok()).unwrap_or(4e-4),
        ),
        Some("full") => full(
            args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8),
            args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3),
            args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4e-4),
        ),
        Some("select") => select(args.get(2).map(String::as_str).unwrap_or("head")),
        _ => eprintln!(
            "usage: calibrate sanity [n [encoder]] | trace [seed] | al [budget [base [seeds]]] | full [base [seeds]]"
        ),
    }
}

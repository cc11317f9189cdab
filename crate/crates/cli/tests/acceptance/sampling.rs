use genhmr::config::{Config, ScheduleKind};
use genhmr::inference::{trajectory, ugs_decode, DecodeConfig};
use genhmr::rng::{stream, Stream};
use genhmr::training::{anneal_tau, argmax, gumbel_noise, gumbel_softmax, mask_count, perturbed_softmax, AnnealSchedule};
use numcore::{Tape, Tensor};
use rand::RngCore;

use crate::fixtures::{small_config, small_model, small_setup};
use crate::Checks;

pub fn schedule_arithmetic(checks: &mut Checks) {
    let got = trajectory(ScheduleKind::Cosine, 5, 96);
    checks.expect(got == [87, 78, 48, 18, 0], format!("cosine T=5 L=96 trajectory {got:?} vs [87, 78, 48, 18, 0]"));

    let counts = [0.0, 0.5, 1.0].map(|tau| mask_count(tau, 96));
    checks.expect(counts == [96, 68, 0], format!("training mask counts {counts:?}"));

    let cfg = Config::default();
    let sched = AnnealSchedule {
        start: cfg.tau_start,
        end: cfg.tau_end,
        fraction: cfg.anneal_fraction,
        total_steps: cfg.steps,
    };
    let span = (cfg.anneal_fraction * cfg.steps as f64) as usize;
    let (first, last, mid) = (anneal_tau(0, &sched), anneal_tau(span, &sched), anneal_tau(span / 2, &sched));
    checks.expect(first == 1.0 && last == 0.01, format!("anneal endpoints {first}, {last}"));
    checks.expect((mid - 0.505).abs() < 1e-12, format!("anneal midpoint {mid}"));
}

pub fn decoding_properties(checks: &mut Checks) {
    let cfg = small_config();
    let s = small_setup();
    let (k, len) = (cfg.n_codes, cfg.n_tokens);

    let mut decodes = 0;
    let mut violations = 0;
    let mut rng = stream(4, Stream::Sampling);
    for case in 0..250u64 {
        let model = if case % 50 == 0 { small_model(&cfg, case, 0.5) } else { s.model.clone() };
        let rows: Vec<usize> = (0..4).map(|i| ((case as usize) + i) % 5).collect();
        let feats = model.feature_values(&s.data.select(&rows).unwrap().images).unwrap();
        let dc = DecodeConfig {
            schedule: ScheduleKind::ALL[(case % 4) as usize],
            iters: 1 + (case % 8) as usize,
            topk: 1 + (case % 4) as usize,
        };
        for r in ugs_decode(&model, &feats, &dc, &mut rng).unwrap() {
            decodes += 1;
            let mut ok = r.masked_counts() == trajectory(dc.schedule, dc.iters, len);
            ok &= r.tokens.iter().all(|&t| t < k);
            for w in r.iterations.windows(2) {
                ok &= (0..len).all(|i| w[0].slots[i] == k || w[0].slots[i] == w[1].slots[i]);
            }
            violations += usize::from(!ok);
        }
    }
    checks.expect(violations == 0, format!("monotone commitment: {violations}/{decodes} decodes violate"));

    let feats = s.model.feature_values(&s.data.images).unwrap();
    let greedy = DecodeConfig {
        schedule: ScheduleKind::Cosine,
        iters: 4,
        topk: 1,
    };
    let mut a = stream(5, Stream::Sampling);
    let mut b = stream(77, Stream::Sampling);
    let ra = ugs_decode(&s.model, &feats, &greedy, &mut a).unwrap();
    let rb = ugs_decode(&s.model, &feats, &greedy, &mut b).unwrap();
    let untouched = a.next_u64() == stream(5, Stream::Sampling).next_u64();
    checks.expect(ra == rb && untouched, "k=1 decoding independent of and draws nothing from the RNG");

    let mut tiny = small_config();
    tiny.n_codes = 4;
    tiny.n_tokens = 3;
    let (k, len) = (4, 3);
    let mut mismatches = 0;
    for seed in 0..20 {
        let model = small_model(&tiny, seed, 0.5);
        let img = s.data.select(&[(seed % 5) as usize]).unwrap().images;
        let feats = model.feature_values(&img).unwrap();
        let dc = DecodeConfig {
            schedule: ScheduleKind::Linear,
            iters: len,
            topk: 1,
        };
        let rec = ugs_decode(&model, &feats, &dc, &mut stream(0, Stream::Sampling)).unwrap().remove(0);
        let mut slots = vec![k; len];
        for _ in 0..len {
            let logits = model.logits_values(&feats, &slots).unwrap();
            let mut best: Option<(usize, usize, f64)> = None;
            for i in (0..len).filter(|&i| slots[i] == k) {
                let row = &logits.data()[i * k..(i + 1) * k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                for (t, v) in row.iter().enumerate() {
                    let p = v.exp() / z;
                    if best.is_none_or(|(_, _, bp)| p > bp) {
                        best = Some((i, t, p));
                    }
                }
            }
            let (i, t, _) = best.unwrap();
            slots[i] = t;
        }
        mismatches += usize::from(rec.tokens != slots);
    }
    checks.expect(mismatches == 0, format!("exhaustive argmax oracle: {mismatches}/20 mismatches"));
}

pub fn gumbel_statistics(checks: &mut Checks) {
    let logits = [0.5, -1.0, 1.2, 0.0, -0.3];
    let k = logits.len();
    let draws = 100_000;
    let mut rng = stream(9, Stream::Gumbel);
    let noise = gumbel_noise(&mut rng, draws * k);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[draws, k], |i| logits[i % k]));
    let (hard, _) = gumbel_softmax(&mut tape, x, &noise, 1.0).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    let mut worst: f64 = 0.0;
    for (c, l) in logits.iter().enumerate() {
        let freq = hard.iter().filter(|&&h| h == c).count() as f64 / draws as f64;
        worst = worst.max((freq - l.exp() / z).abs());
    }
    checks.expect(worst <= 0.01, format!("tau=1 frequency error {worst:.4} over {draws} draws"));

    let draws = 1000;
    let noise = gumbel_noise(&mut rng, draws * k);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[draws, k], |i| logits[i % k]));
    let (hard, soft) = perturbed_softmax(&mut tape, x, &noise, 1e-4).unwrap();
    let peaks: Vec<(usize, f64)> = tape
        .value(soft)
        .rows()
        .map(|r| (argmax(r), r.iter().cloned().fold(0.0, f64::max)))
        .collect();
    let (first_arg, first_peak) = peaks[0];
    let peaked = peaks.iter().filter(|p| p.1 > 0.999).count();
    let agree = peaks.iter().zip(&hard).all(|(p, &h)| p.0 == h);
    checks.expect(
        first_peak > 0.999 && first_arg == hard[0] && agree,
        format!("tau=1e-4 soft max entry {first_peak:.6} at the hard choice ({peaked}/{draws} draws above 0.999)"),
    );
}

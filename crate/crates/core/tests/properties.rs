use proptest::prelude::*;

use evk::packing::{self, SampleRecord, TailPolicy};
use evk::partition::{self, EncoderProfile, ImageGeometry};
use evk::quant::{self, format, WeightTensor};
use evk::rlaif::{self, ClaimVerdict, ResponseRecord};
use evk::schema::{self, SchemaConfig};

fn encoder() -> impl Strategy<Value = EncoderProfile> {
    (8u32..=40, 8u32..=40, 1u32..=128, 1u32..=12)
        .prop_map(|(a, b, q, n)| EncoderProfile::new(14 * a, 14 * b, 14, q, n).unwrap())
}

proptest! {
    #[test]
    fn score_is_scale_invariant(w in 1u32..4000, h in 1u32..4000, shift in 0u32..8, m in 1u32..5, n in 1u32..5) {
        let enc = EncoderProfile::minicpm_llama3_v2_5();
        let c = 1u32 << shift;
        let a = partition::partition_score(&ImageGeometry::new(w, h).unwrap(), &enc, m, n);
        let b = partition::partition_score(&ImageGeometry::new(w * c, h * c).unwrap(), &enc, m, n);
        prop_assert!(a <= 0.0);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn plan_tiles_the_image(w in 1u32..6000, h in 1u32..6000, enc in encoder()) {
        let plan = partition::plan_partition(&ImageGeometry::new(w, h).unwrap(), &enc);
        let area: u64 = plan.slices.iter().map(|s| s.src_area()).sum();
        prop_assert_eq!(area, u64::from(w) * u64::from(h));
        prop_assert!(plan.slices.len() as u32 <= enc.max_ideal_slices());
        prop_assert_eq!(plan.overview.is_some(), plan.slices.len() > 1);
        prop_assert_eq!(plan.visual_token_count, partition::token_budget(&plan, &enc));
        for s in plan.encoded_slices() {
            prop_assert!(s.enc_w % enc.patch_px() == 0 && s.enc_h % enc.patch_px() == 0);
            prop_assert!(s.enc_w > 0 && s.enc_h > 0);
        }
    }

    #[test]
    fn slice_resize_keeps_area_close(w in 16u32..=8192, h in 16u32..=8192) {
        let enc = EncoderProfile::minicpm_llama3_v2_5();
        let (ew, eh) = partition::slice_resize(w, h, &enc);
        let p = u64::from(enc.patch_px());
        let clamped = ew == enc.patch_px() || eh == enc.patch_px();
        let diff = (u64::from(ew) * u64::from(eh)).abs_diff(enc.vit_area());
        prop_assert!(clamped || diff <= p * u64::from(ew + eh), "{}x{} -> {}x{}", w, h, ew, eh);
    }

    #[test]
    fn schema_round_trips(w in 1u32..5000, h in 1u32..5000, enc in encoder()) {
        let plan = partition::plan_partition(&ImageGeometry::new(w, h).unwrap(), &enc);
        let cfg = SchemaConfig::default();
        let layout = schema::serialize_layout(&plan, &enc, &cfg);
        let shape = schema::parse_layout(&layout.tokens, &cfg).unwrap();
        prop_assert_eq!((shape.columns, shape.rows), (plan.columns, plan.rows));
        prop_assert_eq!(shape.queries_per_slice, enc.queries_per_slice());
        prop_assert_eq!(shape.overview_present, plan.overview.is_some());
        prop_assert_eq!(layout.len(), plan.visual_token_count as usize + schema::count_schema_tokens(&plan));
        let placeholders = layout.tokens.iter().filter(|t| **t == cfg.img_placeholder).count();
        prop_assert_eq!(placeholders, plan.visual_token_count as usize);
    }

    #[test]
    fn packing_conserves_tokens(
        lengths in prop::collection::vec(1usize..200, 0..40),
        capacity in 1usize..128,
        drop in any::<bool>(),
    ) {
        let samples: Vec<SampleRecord> =
            lengths.iter().enumerate().map(|(i, &l)| SampleRecord::new(format!("s{i}"), l)).collect();
        let tail = if drop { TailPolicy::Drop } else { TailPolicy::Pad };
        let out = packing::pack(&samples, capacity, tail).unwrap();
        let kept: usize = out.sequences.iter().map(|s| s.used()).sum();
        prop_assert_eq!(kept + out.truncated_tokens + out.dropped_tail_tokens, lengths.iter().sum::<usize>());
        for seq in &out.sequences {
            seq.validate().unwrap();
            let pos = packing::position_ids(seq);
            prop_assert_eq!(pos.len(), capacity);
            let mut i = 0;
            for seg in &seq.segments {
                prop_assert_eq!(&pos[i..i + seg.taken_length], &(0..seg.taken_length).collect::<Vec<_>>()[..]);
                i += seg.taken_length;
            }
            prop_assert!(pos[i..].iter().all(|&p| p == 0));
        }
        if drop {
            prop_assert!(out.sequences.iter().all(|s| s.pad_length == 0));
        }
    }

    #[test]
    fn quantization_is_idempotent(values in prop::collection::vec(-1.0e4f32..1.0e4, 1..200), block in 1usize..70) {
        let t = WeightTensor::new("p", values);
        let q = quant::quantize(&t, block).unwrap();
        let again = quant::quantize(&quant::dequantize(&q), block).unwrap();
        prop_assert_eq!(&q, &again);

        let mut bytes = Vec::new();
        format::write_quantized(&mut bytes, &q).unwrap();
        prop_assert_eq!(format::read_quantized(&bytes[..], "p").unwrap(), q);
    }

    #[test]
    fn pairs_respect_cap_and_order(
        specs in prop::collection::vec((0usize..4, prop::collection::vec(any::<bool>(), 0..6)), 0..30),
        max in 1usize..6,
        seed in any::<u64>(),
    ) {
        let responses: Vec<ResponseRecord> = specs
            .iter()
            .enumerate()
            .map(|(i, (q, claims))| {
                let claims = claims.iter().map(|&v| ClaimVerdict::new("c", v)).collect();
                ResponseRecord::new(format!("r{i}"), format!("q{q}"), claims)
            })
            .collect();
        let pairs = rlaif::build_preference_pairs(&responses, seed, max).unwrap();
        for q in 0..4 {
            let id = format!("q{q}");
            let group: Vec<&ResponseRecord> = responses.iter().filter(|r| r.instruction_id == id).collect();
            let available = rlaif::candidate_pairs(&group).len();
            let got = pairs.iter().filter(|p| p.instruction_id == id).count();
            prop_assert_eq!(got, available.min(max));
        }
        prop_assert!(pairs.iter().all(|p| p.winner_score > p.loser_score));
    }
}

use im2tex::data::bucket::{assign, bucket_images, buckets_for};
use im2tex::data::image::GrayImage;
use im2tex::data::manifest::{load_dataset, save_dataset};
use im2tex::data::pgm::{read_image, Pgm};
use im2tex::data::synth::{self, rasterize_tokens, GrammarConfig};
use im2tex::data::tokenize::{detokenize, tokenize, Lexicon, TokenizerMode};
use im2tex::data::vocab::Vocabulary;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn fraction_is_twenty_nine_rows() {
    let img = rasterize_tokens(&toks("\\frac { 1 } { 2 }"), 4).unwrap();
    assert_eq!(img.height, 2 * 10 + 1 + 2 * 4);
    assert_eq!(img.height, 29);
}

#[test]
fn plain_and_binary_pgm_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let body = "3 2\n255\n0 128 255\n7 64 200\n";
    std::fs::write(dir.path().join("a.pgm"), format!("P2\n{body}")).unwrap();
    let mut p5 = b"P5\n3 2\n255\n".to_vec();
    p5.extend_from_slice(&[0, 128, 255, 7, 64, 200]);
    std::fs::write(dir.path().join("b.pgm"), p5).unwrap();
    let a = read_image(&dir.path().join("a.pgm")).unwrap();
    let b = read_image(&dir.path().join("b.pgm")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.get(1, 0), 128.0 / 255.0);
    assert_eq!(a.get(0, 1), 7.0 / 255.0);
}

#[test]
fn malformed_pgm_reports_an_offset() {
    let err = Pgm::parse(b"P2\n3 x\n255\n").unwrap_err().to_string();
    assert!(matches!(Pgm::parse(b"P2\n3 x\n255\n"), Err(im2tex::Error::Format { offset: 5, .. })), "{err}");
}

#[test]
fn generator_is_deterministic_and_round_trips() {
    let cfg = GrammarConfig::default();
    let a = synth::generate(7, 1, &cfg).unwrap();
    let b = synth::generate(7, 1, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |e: &synth::SynthExample| e.image.pixels.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a[0]), bits(&b[0]));
    for ex in synth::generate(11, 50, &cfg).unwrap() {
        assert_eq!(rasterize_tokens(&ex.tokens, cfg.margin).unwrap(), ex.image);
    }
    // any subset regenerates on its own
    let many = synth::generate(7, 5, &cfg).unwrap();
    assert_eq!(many[0], a[0]);
}

#[test]
fn dataset_write_then_read_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth::generate(3, 6, &GrammarConfig::default()).unwrap();
    let pairs: Vec<(GrayImage, Vec<String>)> = set.iter().map(|e| (e.image.clone(), e.tokens.clone())).collect();
    for binary in [false, true] {
        let sub = dir.path().join(if binary { "p5" } else { "p2" });
        let manifest = save_dataset(&sub, "train.tsv", &pairs, binary).unwrap();
        let back = load_dataset(&manifest, 40).unwrap();
        assert_eq!(back.len(), pairs.len());
        for (b, (img, t)) in back.iter().zip(&pairs) {
            assert_eq!(&b.image, img);
            assert_eq!(&b.tokens, t);
        }
        assert!(load_dataset(&manifest, 1).is_err());
    }
}

#[test]
fn oversize_images_are_dropped_or_rejected() {
    let imgs = [GrayImage::blank(10, 10), GrayImage::blank(100, 10)];
    let buckets = buckets_for(&imgs[..1], 32, 8);
    let got = bucket_images(&imgs, &buckets, true).unwrap();
    assert_eq!(got.dropped, vec![1]);
    assert!(bucket_images(&imgs, &buckets, false).is_err());
}

fn char_token() -> impl Strategy<Value = String> {
    proptest::char::range('!', '~').prop_map(String::from)
}

fn lexicon_token() -> impl Strategy<Value = String> {
    prop_oneof![
        char_token(),
        proptest::sample::select(im2tex::data::tokenize::DEFAULT_LEXICON).prop_map(String::from),
    ]
}

proptest! {
    #[test]
    fn chars_mode_round_trips(tokens in proptest::collection::vec(char_token(), 0..30)) {
        let mode = TokenizerMode::Chars;
        let t = tokenize(&detokenize(&tokens, &mode), &mode);
        prop_assert_eq!(t.tokens, tokens);
    }

    #[test]
    fn lexicon_mode_round_trips(tokens in proptest::collection::vec(lexicon_token(), 0..30)) {
        let mode = TokenizerMode::Lexicon(Lexicon::default_commands());
        let t = tokenize(&detokenize(&tokens, &mode), &mode);
        prop_assert_eq!(t.tokens, tokens);
    }

    #[test]
    fn generated_images_have_ink_iff_tokens_do(seed in any::<u64>()) {
        let cfg = GrammarConfig::default();
        let ex = synth::generate(seed, 1, &cfg).unwrap().remove(0);
        prop_assert_eq!(ex.image.has_ink(), !ex.tokens.is_empty());
        let empty: [&str; 0] = [];
        prop_assert!(!rasterize_tokens(&empty, cfg.margin).unwrap().has_ink());
    }

    #[test]
    fn bucketed_content_is_pixel_identical(seed in any::<u64>(), n in 1usize..8) {
        let set = synth::generate(seed, n, &GrammarConfig::default()).unwrap();
        let imgs: Vec<&GrayImage> = set.iter().map(|e| &e.image).collect();
        let buckets = buckets_for(imgs.iter().copied(), 32, 8);
        for img in imgs {
            let b = assign(img, &buckets).unwrap();
            prop_assert!(b.width.is_multiple_of(8) && b.height.is_multiple_of(8));
            let padded = img.pad_to(b.width, b.height).unwrap();
            for y in 0..b.height {
                for x in 0..b.width {
                    let want = if x < img.width && y < img.height { img.get(x, y) } else { 1.0 };
                    prop_assert_eq!(padded.get(x, y), want);
                }
            }
        }
    }

    #[test]
    fn vocabulary_ids_are_stable(seed in any::<u64>(), n in 1usize..10) {
        let set = synth::generate(seed, n, &GrammarConfig::default()).unwrap();
        let seqs: Vec<Vec<String>> = set.iter().map(|e| e.tokens.clone()).collect();
        let a = Vocabulary::build(&seqs);
        let b = Vocabulary::build(&seqs);
        let mut rev = seqs.clone();
        rev.reverse();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &Vocabulary::build(&rev));
        for s in &seqs {
            prop_assert_eq!(a.decode(&a.encode_bracketed(s)), s.clone());
        }
    }
}

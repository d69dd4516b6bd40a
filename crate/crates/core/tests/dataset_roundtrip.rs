use disentangle_seg::data::{load_dataset, save_dataset, Image, Mask};
use disentangle_seg::{Dataset, Sample};
use proptest::prelude::*;

const SIZE: usize = 8;

fn sample_strategy() -> impl Strategy<Value = (Vec<u8>, Vec<bool>)> {
    (
        proptest::collection::vec(any::<u8>(), SIZE * SIZE),
        proptest::collection::vec(any::<bool>(), SIZE * SIZE),
    )
}

fn build(domains: &[Vec<(Vec<u8>, Vec<bool>)>], seed: u64) -> Dataset {
    let mut samples = Vec::new();
    for (d, items) in domains.iter().enumerate() {
        for (i, (pixels, labels)) in items.iter().enumerate() {
            let image = Image::new(SIZE, SIZE, pixels.iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
            let mask = Mask::new(SIZE, SIZE, labels.iter().map(|&b| b as u8).collect()).unwrap();
            let domain = ["A", "B", "C"][d];
            samples.push(Sample::new(format!("{domain}_{i:04}"), image, mask, domain).unwrap());
        }
    }
    Dataset::new(samples, Some(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_then_load_is_identity(
        domains in proptest::collection::vec(proptest::collection::vec(sample_strategy(), 1..4), 1..4),
        seed in any::<u64>(),
    ) {
        let ds = build(&domains, seed);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), SIZE).unwrap();
        prop_assert_eq!(back.samples(), ds.samples());
        prop_assert_eq!(back.content_hash(), ds.content_hash());
        prop_assert_eq!(back.seed(), Some(seed));
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let ds = build(&[vec![(vec![0; SIZE * SIZE], vec![false; SIZE * SIZE])]], 0);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    assert!(load_dataset(dir.path(), SIZE * 2).is_err());
}

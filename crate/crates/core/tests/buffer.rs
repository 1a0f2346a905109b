use deco_core::buffer::{initialize_buffer, load_buffer, read_buffer, save_buffer, write_buffer, InitMode};
use deco_core::data::synthetic_blob_dataset;
use deco_core::{CondensedBuffer, Normalization, Shape};
use proptest::prelude::*;

fn buffer(classes: usize, ipc: usize, seed: u64) -> CondensedBuffer<f64> {
    let data = synthetic_blob_dataset::<f64>(classes, 10, Shape::new(1, 2, 2), 2.0, seed).unwrap();
    let norm = Normalization { mean: vec![0.0], std: vec![1.0], raw_min: vec![-4.0], raw_max: vec![4.0] };
    initialize_buffer(&data, ipc, &InitMode::RealSample, norm, seed).unwrap()
}

proptest! {
    #[test]
    fn writes_through_slice_respect_invariants(
        classes in 1usize..5,
        ipc in 1usize..4,
        picks in prop::collection::vec(0usize..20, 0..8),
        delta in -10.0f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut buf = buffer(classes, ipc, seed);
        let before = buf.clone();
        let chosen: Vec<usize> = picks.into_iter().filter(|&c| c < classes).collect();
        let slots = buf.slots_for_classes(&chosen).unwrap();
        buf.slice_by_classes_mut(&chosen).unwrap().update(|_, _, px| px.iter_mut().for_each(|v| *v += delta));
        prop_assert_eq!(buf.len(), classes * ipc);
        prop_assert!(buf.check_balance().is_ok());
        prop_assert_eq!(buf.labels(), before.labels());
        prop_assert_eq!(buf.version(), before.version() + 1);
        for i in 0..buf.len() {
            if slots.contains(&i) {
                prop_assert!(buf.images().image(i).iter().all(|v| (-4.0..=4.0).contains(v)));
            } else {
                prop_assert_eq!(buf.images().image(i), before.images().image(i));
            }
        }
        let view = buf.slice_by_classes(&chosen).unwrap();
        prop_assert_eq!(view.indices.len(), slots.len());
        prop_assert!(view.labels.iter().all(|l| chosen.contains(l)));
    }
}

#[test]
fn save_load_save_is_byte_identical_and_keeps_version() {
    let mut buf = buffer(3, 2, 5);
    buf.slots_mut(&[1, 4]).unwrap().update(|_, _, px| px[0] = 0.25);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buf.deco");
    save_buffer(&buf, &path).unwrap();
    let loaded: CondensedBuffer<f64> = load_buffer(&path).unwrap();
    assert_eq!(loaded.version(), buf.version());
    assert_eq!(write_buffer(&loaded), std::fs::read(&path).unwrap());
    let narrow =
        CondensedBuffer::from_images(buf.images().map(|v| v as f32), 3, 2, buf.normalization().clone()).unwrap();
    assert_eq!(read_buffer::<f32>(&write_buffer(&narrow)).unwrap().images(), narrow.images());
}

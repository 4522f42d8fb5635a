//! Raster container, split manifests, label remapping and the synthetic scenes.

use std::path::Path;

use mscloudcam::datapipe::{
    collate, normalize_reflectance, remap_l8biome, remap_l8biome_value, synth_dataset, MstFile,
    Payload, Sensor, SplitManifest, IGNORE_LABEL, MST_MAGIC,
};
use mscloudcam::numerics::Tensor;
use mscloudcam::Error;
use proptest::prelude::*;

fn mst_strategy() -> impl Strategy<Value = MstFile> {
    (
        prop_oneof![Just(Sensor::Sentinel2L1c), Just(Sensor::Landsat8)],
        1usize..6,
        1usize..6,
    )
        .prop_flat_map(|(sensor, h, w)| {
            let c = sensor.bands();
            let pixels = proptest::collection::vec(0f32..10000.0, c * h * w);
            let labels = proptest::option::of(proptest::collection::vec(any::<u8>(), h * w));
            (pixels, labels).prop_map(move |(p, l)| MstFile {
                sensor,
                channels: c,
                height: h,
                width: w,
                payload: Payload::F32(p),
                labels: l,
            })
        })
}

fn id() -> impl Strategy<Value = String> {
    "[a-z0-9_]{1,8}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mst_round_trips_byte_exact(file in mst_strategy()) {
        let bytes = file.to_bytes().unwrap();
        let back = MstFile::from_bytes(&bytes, Path::new("p.mst")).unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn mst_truncation_is_always_detected(file in mst_strategy(), cut in 0.0f64..1.0) {
        let bytes = file.to_bytes().unwrap();
        let n = (bytes.len() as f64 * cut) as usize;
        let label_block = 1 + file.labels.as_ref().map_or(0, Vec::len);
        match MstFile::from_bytes(&bytes[..n], Path::new("p.mst")) {
            // the presence byte is optional, so stopping right before it is a label-free file
            Ok(back) => {
                prop_assert_eq!(n, bytes.len() - label_block);
                prop_assert_eq!(back, MstFile { labels: None, ..file });
            }
            Err(e) => prop_assert!(matches!(e, Error::Parse { .. }), "{}", e),
        }
    }

    #[test]
    fn manifests_round_trip(ids in proptest::collection::btree_set(id(), 0..12), cut in 0usize..12) {
        let ids: Vec<String> = ids.into_iter().collect();
        let cut = cut.min(ids.len());
        let m = SplitManifest {
            splits: vec![("train".into(), ids[..cut].to_vec()), ("test".into(), ids[cut..].to_vec())],
        };
        let back = SplitManifest::parse(&m.to_text(), Path::new("splits.txt")).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn synthetic_scenes_contain_every_class(seed in 0u64..10_000) {
        let s = &synth_dataset(1, 64, 13, seed)[0];
        let labels = s.labels.as_ref().unwrap();
        for k in 0..4u8 {
            prop_assert!(labels.contains(&k), "class {} missing for seed {}", k, seed);
        }
        prop_assert!(s.raw.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn remap_covers_every_byte() {
    let expected = [(0u8, IGNORE_LABEL), (64, 3), (128, 0), (192, 2), (255, 1)];
    for v in 0..=255u8 {
        let want = expected.iter().find(|(raw, _)| *raw == v).map(|(_, c)| *c);
        assert_eq!(remap_l8biome_value(v), want, "raw {v}");
    }
    assert_eq!(
        remap_l8biome(&[0, 64, 128, 192, 255]).unwrap(),
        vec![255, 3, 0, 2, 1]
    );
    let err = remap_l8biome(&[128, 7, 7, 9]).unwrap_err().to_string();
    assert!(
        err.contains("7 (2 px)") && err.contains("9 (1 px)"),
        "{err}"
    );
}

#[test]
fn normalisation_divides_by_3000_without_clipping() {
    let raw = Tensor::new(&[1, 1, 1, 3], vec![0.0f32, 3000.0, 12000.0]).unwrap();
    assert_eq!(normalize_reflectance(&raw).data(), &[0.0, 1.0, 4.0]);
}

#[test]
fn collate_rejects_mixed_sizes() {
    let a = synth_dataset(1, 32, 13, 1).remove(0);
    let b = synth_dataset(1, 40, 13, 1).remove(0);
    let (x, labels) = collate(&[&a, &a]).unwrap();
    assert_eq!(x.shape(), &[2, 13, 32, 32]);
    assert_eq!(labels.len(), 2 * 32 * 32);
    assert!(matches!(collate(&[&a, &b]), Err(Error::Data(_))));
}

#[test]
fn bad_magic_and_overlapping_splits_are_parse_errors() {
    let file = synth_dataset(1, 8, 11, 0).remove(0).to_mst();
    let mut bytes = file.to_bytes().unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    let err = MstFile::from_bytes(&bytes, Path::new("p.mst")).unwrap_err();
    assert!(
        err.to_string()
            .contains(std::str::from_utf8(MST_MAGIC).unwrap()),
        "{err}"
    );

    let text = "split train 1\na\nsplit test 1\na\n";
    assert!(matches!(
        SplitManifest::parse(text, Path::new("s.txt")),
        Err(Error::Parse { .. })
    ));
    let text = "split train 2\na\n";
    assert!(SplitManifest::parse(text, Path::new("s.txt")).is_err());
}

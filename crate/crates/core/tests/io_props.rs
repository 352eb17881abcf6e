//! Round-trip properties for the on-disk formats.

use danet_core::checkpoint;
use danet_core::data::image::{decode_pnm, encode_pnm};
use danet_core::data::manifest::DatasetManifest;
use danet_core::data::voc::{parse_voc_xml, write_voc_xml, AnnotatedObject, Annotation};
use danet_core::params::ParamStore;
use danet_core::{BBox, Tensor};
use proptest::prelude::*;

fn annotation() -> impl Strategy<Value = Annotation> {
    (8usize..200, 8usize..200, "[a-z]{1,8}").prop_flat_map(|(w, h, id)| {
        let obj = (0..w, 0..h, 1usize..=w, 1usize..=h, "[a-z_-]{1,10}").prop_map(move |(x, y, bw, bh, name)| {
            let (x2, y2) = ((x + bw).min(w), (y + bh).min(h));
            AnnotatedObject {
                name,
                bbox: BBox::new(x as f64, y as f64, x2.max(x + 1) as f64, y2.max(y + 1) as f64).unwrap(),
            }
        });
        prop::collection::vec(obj, 0..5).prop_map(move |objects| Annotation {
            id: id.clone(),
            width: w,
            height: h,
            objects: objects
                .into_iter()
                .filter(|o| o.bbox.x2 <= w as f64 && o.bbox.y2 <= h as f64)
                .collect(),
        })
    })
}

proptest! {
    #[test]
    fn voc_annotations_round_trip(ann in annotation()) {
        ann.validate().unwrap();
        let back = parse_voc_xml(&write_voc_xml(&ann)).unwrap();
        prop_assert_eq!(back, ann);
    }

    #[test]
    fn checkpoints_round_trip_at_f32_precision(
        tensors in prop::collection::btree_map("[a-z.0-9]{1,12}", prop::collection::vec(-1e6f64..1e6, 1..24), 0..6),
    ) {
        let mut store = ParamStore::new();
        for (name, data) in &tensors {
            let n = data.len();
            store.insert(name.clone(), Tensor::new(&[n], data.clone()).unwrap());
        }
        checkpoint::quantize(&mut store);
        let bytes = checkpoint::encode(&store);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        // byte-identical re-encoding
        prop_assert_eq!(checkpoint::encode(&back), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(len in 0usize..64) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn(&[2, 3], |i| i as f64));
        let bytes = checkpoint::encode(&store);
        prop_assume!(len < bytes.len());
        prop_assert!(checkpoint::decode(&bytes[..len]).is_err());
    }

    #[test]
    fn pnm_round_trips_quantised_pixels(
        c in prop::sample::select(vec![1usize, 3]), h in 1usize..12, w in 1usize..12, seed in prop::collection::vec(0u8..=255, 432),
    ) {
        let t = Tensor::from_fn(&[c, h, w], |i| seed[i] as f64 / 255.0);
        let back = decode_pnm(&encode_pnm(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.max_abs_diff(&t) <= 1e-12);
    }

    #[test]
    fn manifests_round_trip_through_json(
        classes in prop::collection::btree_set("[a-z]{1,6}", 1..6),
        ids in prop::collection::btree_set("[0-9]{1,5}", 0..12),
        cut in 0usize..12,
    ) {
        let ids: Vec<String> = ids.into_iter().collect();
        let cut = cut.min(ids.len());
        let m = DatasetManifest {
            classes: classes.into_iter().collect(),
            train: ids[..cut].to_vec(),
            test: ids[cut..].to_vec(),
        };
        m.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        prop_assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}

use std::collections::BTreeSet;

use camscope_core::phantom::{generate_dataset, lobe_partition, PhantomSpec};
use camscope_core::store::{read_json, DatasetIndex, Lobe, ManifestFile, Split, ValueKind};

fn spec() -> PhantomSpec {
    PhantomSpec {
        volume_shape: [48, 48, 24],
        n_typical: 12,
        n_nontypical: 12,
        seed: 11,
        ..PhantomSpec::default()
    }
}

#[test]
fn generated_cases_respect_their_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec();
    let index = generate_dataset(&spec, dir.path()).unwrap();
    let index_path = dir.path().join("manifest.json");
    assert_eq!(read_json::<DatasetIndex>(&index_path).unwrap(), index);

    let mut ids = BTreeSet::new();
    let mut per_lobe = [0usize; 5];
    let mut sizes = Vec::new();
    for split in Split::ALL {
        let m = ManifestFile::open(index.split_path(&index_path, split).unwrap()).unwrap();
        sizes.push(m.manifest.entries.len());
        for e in &m.manifest.entries {
            assert!(ids.insert(e.case_id.clone()), "{} appears twice", e.case_id);
            let (ct, meta, mask) = m.read_case(e).unwrap();
            assert_eq!(meta.value_kind, ValueKind::Hounsfield);
            assert_eq!(meta.label, Some(e.label));
            assert_eq!(ct.dims(), spec.volume_shape);
            assert_eq!(e.label == 1, !e.lesions.is_empty(), "{}", e.case_id);
            assert!(ct.min() >= -1100.0 && ct.max() <= 200.0);

            let lobes = lobe_partition(&mask).unwrap();
            for l in &e.lesions {
                let c = l.center.map(|v| v.round() as usize);
                assert_eq!(lobes.get(c[0], c[1], c[2]), Some(l.lobe), "{}", e.case_id);
                for (x, y, z) in l.support(ct.dims()) {
                    assert_eq!(mask.get(x, y, z), 1.0);
                    // Lesion tissue is denser than parenchyma.
                    if l.normalized_radius(x, y, z) < 0.5 {
                        assert!(ct.get(x, y, z) > -750.0, "{} at {x},{y},{z}", e.case_id);
                    }
                }
                per_lobe[Lobe::ALL.iter().position(|&k| k == l.lobe).unwrap()] += 1;
            }
        }
    }
    assert_eq!(sizes, spec.split_sizes().to_vec());
    assert_eq!(ids.len(), spec.total_cases());
    let lower = per_lobe[1] + per_lobe[4];
    let total: usize = per_lobe.iter().sum();
    assert!(lower * 2 > total, "lower lobes hold {lower} of {total} lesions");
}

#[test]
fn seed_changes_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(&spec(), a.path()).unwrap();
    generate_dataset(&PhantomSpec { seed: 12, ..spec() }, b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join("cases/case_0000_ct.f32raw")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

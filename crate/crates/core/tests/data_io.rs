use std::fs;

use boxseg::data::{gen_dataset, gen_sample, load_dataset, read_boxes, save_dataset, Manifest};
use boxseg::{DataError, Error};

#[test]
fn save_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let samples = gen_dataset(5, 6, 64).unwrap();
    let manifest = save_dataset(dir.path(), &samples, "train").unwrap();
    let reread = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(reread.entries, manifest.entries);
    assert_eq!(reread.split, "train");
    let loaded = load_dataset(&reread).unwrap();
    for (s, l) in samples.iter().zip(&loaded) {
        assert_eq!(&l.image, &s.image);
        assert_eq!(l.mask.as_ref(), Some(&s.mask));
        assert_eq!(l.boxes.as_ref(), Some(&s.boxes));
        assert!(l.is_box_supervised());
    }
}

#[test]
fn negative_box_coordinate_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.txt");
    fs::write(&path, "# header\n1 1 3 3\n\n2 -1 4 4\n").unwrap();
    match read_boxes(&path, None) {
        Err(Error::Data(e @ DataError::BoxParse { line: 4, .. })) => {
            assert_eq!(e.code(), "E_BOX_PARSE");
            assert!(e.to_string().contains(":4:"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mixed_manifest_loads_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let samples = gen_dataset(9, 2, 32).unwrap();
    save_dataset(dir.path(), &samples, "train").unwrap();
    let text = "images/00000.ppm\tmasks/00000.pgm\t-\nimages/00001.ppm\t-\tboxes/00001.txt\n";
    fs::write(dir.path().join("mixed.txt"), text).unwrap();
    let loaded = load_dataset(&Manifest::load(&dir.path().join("mixed.txt")).unwrap()).unwrap();
    assert!(!loaded[0].is_box_supervised());
    assert_eq!(loaded[0].mask.as_ref(), Some(&samples[0].mask));
    assert!(loaded[1].is_box_supervised());
    assert!(loaded[1].mask.is_none());
    assert_eq!(loaded[1].boxes.as_ref(), Some(&samples[1].boxes));
}

#[test]
fn distinct_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    save_dataset(root, &[gen_sample(1, 32, None).unwrap(), gen_sample(2, 64, None).unwrap()], "x").unwrap();
    let code = |text: &str| {
        fs::write(root.join("m.txt"), text).unwrap();
        let err = Manifest::load(&root.join("m.txt")).and_then(|m| load_dataset(&m)).unwrap_err();
        match err {
            Error::Data(d) => d.code(),
            other => panic!("unexpected {other:?}"),
        }
    };
    assert_eq!(code("images/nope.ppm\tmasks/00000.pgm\t-\n"), "E_MISSING_FILE");
    assert_eq!(code("images/00000.ppm\tmasks/00001.pgm\t-\n"), "E_SIZE_MISMATCH");
    assert_eq!(code("masks/00000.pgm\tmasks/00000.pgm\t-\n"), "E_IMAGE_FORMAT");
    assert_eq!(code("images/00000.ppm\t-\t-\n"), "E_MANIFEST");
    fs::write(root.join("bad.txt"), "0 0 40 4\n").unwrap();
    assert_eq!(code("images/00000.ppm\t-\tbad.txt\n"), "E_BOX_PARSE");
}

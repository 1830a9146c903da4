use std::ffi::CString;
use std::fs;
use std::path::Path;
use std::ptr;

use maskcl::formats::encode_checkpoint;
use maskcl::mask::BinaryMask;
use maskcl::metrics::{accumulate_pq, PqStats};
use maskcl::model::{predict, MaskActivation, ModelConfig, ModelParams};
use maskcl::synthdata::{GtSegment, Image};
use maskcl_ffi::*;

fn small_model() -> ModelParams {
    let config = ModelConfig {
        channels: 3,
        height: 8,
        width: 8,
        queries: 4,
        dim: 8,
        hidden: 6,
        ffn: 8,
        mask_activation: MaskActivation::Softmax,
        new_row_std: 0.01,
    };
    ModelParams::init(config, &[3, 1, 2], 5)
}

fn image() -> Image {
    let mut img = Image::zeros(3, 8, 8);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = ((i * 37) % 11) as f64 / 11.0;
    }
    img
}

#[test]
fn forward_through_c_matches_rust() {
    let params = small_model();
    let bytes = encode_checkpoint(&params).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cmf_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut model) }, CmfStatus::Ok);

    let mut info = CmfModelInfo::default();
    assert_eq!(unsafe { cmf_model_info(model, &mut info) }, CmfStatus::Ok);
    assert_eq!((info.channels, info.height, info.width, info.queries, info.outputs), (3, 8, 8, 4, 4));
    assert_eq!(info.softmax_masks, 1);

    let mut ids = [0u16; 3];
    assert_eq!(unsafe { cmf_model_classes(model, ids.as_mut_ptr(), 3) }, CmfStatus::Ok);
    assert_eq!(ids, [3, 1, 2]);

    let img = image();
    let mut probs = vec![0.0; 16];
    let mut masks = vec![0.0; 4 * 64];
    let status = unsafe {
        cmf_model_forward(model, img.data.as_ptr(), img.data.len(), probs.as_mut_ptr(), probs.len(), masks.as_mut_ptr(), masks.len())
    };
    assert_eq!(status, CmfStatus::Ok);
    let want = predict(&params, &img).unwrap();
    assert_eq!(probs, want.class_probs.iter().copied().collect::<Vec<_>>());
    assert_eq!(masks, want.masks.iter().copied().collect::<Vec<_>>());

    // wrong buffer size
    let status = unsafe {
        cmf_model_forward(model, img.data.as_ptr(), img.data.len(), probs.as_mut_ptr(), 15, masks.as_mut_ptr(), masks.len())
    };
    assert_eq!(status, CmfStatus::Shape);
    unsafe { cmf_model_free(model) };
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cmfk");
    fs::write(&path, encode_checkpoint(&small_model()).unwrap()).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cmf_model_load(c.as_ptr(), &mut model) }, CmfStatus::Ok);
    assert!(!model.is_null());
    unsafe { cmf_model_free(model) };

    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cmf_model_load(missing.as_ptr(), &mut model) }, CmfStatus::Io);
}

#[test]
fn hungarian_through_c() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0];
    let mut a = [usize::MAX; 2];
    assert_eq!(unsafe { cmf_hungarian(cost.as_ptr(), 2, 3, a.as_mut_ptr()) }, CmfStatus::Ok);
    assert_eq!(a, [1, 0]);
    // more rows than columns
    let mut b = [0usize; 3];
    assert_ne!(unsafe { cmf_hungarian(cost.as_ptr(), 3, 2, b.as_mut_ptr()) }, CmfStatus::Ok);
}

#[test]
fn pq_through_c_matches_rust() {
    // 2x3 image; gt has two segments, the prediction merges a pixel wrongly
    let gt_ids = [1u32, 1, 2, 1, 2, 2];
    let pred_ids = [1u32, 1, 1, 1, 2, 2];
    let classes = [7u16, 9];
    let stats = cmf_pq_new();
    let status = unsafe {
        cmf_pq_accumulate(stats, 2, 3, pred_ids.as_ptr(), classes.as_ptr(), 2, gt_ids.as_ptr(), classes.as_ptr(), 2)
    };
    assert_eq!(status, CmfStatus::Ok);

    let seg = |ids: &[u32], s: u32, c: u16| GtSegment {
        class_id: c,
        mask: BinaryMask::from_bits(2, 3, ids.iter().map(|&v| v == s).collect()).unwrap(),
    };
    let mut want = PqStats::default();
    accumulate_pq(
        &[seg(&pred_ids, 1, 7), seg(&pred_ids, 2, 9)],
        &[seg(&gt_ids, 1, 7), seg(&gt_ids, 2, 9)],
        &mut want,
    )
    .unwrap();
    for c in classes {
        let mut got = CmfClassPq::default();
        assert_eq!(unsafe { cmf_pq_class(stats, c, &mut got) }, CmfStatus::Ok);
        let w = want.get(c);
        assert_eq!((got.tp, got.fp, got.fn_), (w.tp, w.fp, w.fn_));
        assert_eq!(got.iou_sum, w.iou_sum);
        assert_eq!(got.pq, w.pq().unwrap());
    }
    let mut absent = CmfClassPq::default();
    assert_eq!(unsafe { cmf_pq_class(stats, 42, &mut absent) }, CmfStatus::Ok);
    assert!(absent.pq.is_nan());
    unsafe { cmf_pq_free(stats) };
}

#[test]
fn header_declares_the_interface() {
    let header = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/maskcl.h")).unwrap();
    for name in [
        "cmf_model_load",
        "cmf_model_from_bytes",
        "cmf_model_forward",
        "cmf_model_free",
        "cmf_hungarian",
        "cmf_pq_accumulate",
        "cmf_last_error",
        "CMF_STATUS_NULL_POINTER",
        "typedef struct CmfModel CmfModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    fs::write(
        &src,
        "#include \"maskcl.h\"\nint f(void) { CmfModel *m = 0; CmfStatus s = cmf_model_load(\"x\", &m); cmf_model_free(m); return (int)s; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        // no C compiler on this machine
        Err(_) => return,
    };
    assert!(status.success());
}

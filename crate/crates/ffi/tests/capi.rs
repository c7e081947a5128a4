use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use ptopk::patches::{slice_patches, PatchGeometry};
use ptopk::perturbed::{perturbed_topk_backward, perturbed_topk_forward, PerturbedConfig};
use ptopk::pipeline::{save_checkpoint, Model, ModelConfig};
use ptopk::topk::{hard_topk_indices, indicator_from_indices};
use ptopk::Tensor;
use ptopk_ffi::*;

fn last_error() -> String {
    let p = ptopk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn hard_topk_returns_sorted_indices() {
    let s = [0.3f32, 0.9, 0.1, 0.9, 0.5];
    let mut out = [0usize; 3];
    let st = unsafe { ptopk_hard_topk(s.as_ptr(), s.len(), 3, out.as_mut_ptr()) };
    assert_eq!(st, PtopkStatus::Ok);
    assert_eq!(out, [1, 3, 4]);
}

#[test]
fn errors_carry_status_and_message() {
    let mut out = [0usize; 1];
    let st = unsafe { ptopk_hard_topk(ptr::null(), 4, 1, out.as_mut_ptr()) };
    assert_eq!(st, PtopkStatus::NullPointer);
    assert!(last_error().contains("scores"));

    let s = [1.0f32, 2.0];
    let st = unsafe { ptopk_hard_topk(s.as_ptr(), 2, 3, out.as_mut_ptr()) };
    assert_eq!(st, PtopkStatus::InvalidArgument);
    assert!(last_error().contains("K=3"), "{}", last_error());

    let nan = [1.0f32, f32::NAN];
    let st = unsafe { ptopk_normalize_scores(nan.as_ptr(), 2, 1e-5, [0.0f32; 2].as_mut_ptr()) };
    assert_ne!(st, PtopkStatus::Ok);
}

#[test]
fn normalize_and_schedule() {
    let s = [2.0f32, 4.0, 3.0];
    let mut out = [0.0f32; 3];
    assert_eq!(unsafe { ptopk_normalize_scores(s.as_ptr(), 3, 1e-5, out.as_mut_ptr()) }, PtopkStatus::Ok);
    for (a, b) in out.iter().zip([0.0, 2.0 / (2.0 + 1e-5), 1.0 / (2.0 + 1e-5)]) {
        assert!((a - b).abs() < 1e-7, "{out:?}");
    }
    let mut sigma = 0.0f32;
    assert_eq!(unsafe { ptopk_sigma_schedule(0, 10, 0.5, &mut sigma) }, PtopkStatus::Ok);
    assert_eq!(sigma, 0.5);
    assert_eq!(unsafe { ptopk_sigma_schedule(10, 10, 0.5, &mut sigma) }, PtopkStatus::Ok);
    assert_eq!(sigma, 0.0);
}

#[test]
fn perturbed_round_trip_matches_library() {
    let s = [0.1f32, 0.7, 0.4, 0.65, 0.2];
    let (n, k, samples, sigma, seed) = (5, 2, 200, 0.1f32, 42u64);
    let mut y = vec![0.0f32; n * k];
    let mut ctx: *mut PtopkPerturbed = ptr::null_mut();
    let st = unsafe { ptopk_perturbed_forward(s.as_ptr(), n, k, samples, sigma, seed, y.as_mut_ptr(), &mut ctx) };
    assert_eq!(st, PtopkStatus::Ok);
    assert!(!ctx.is_null());

    let (y_ref, ctx_ref) = perturbed_topk_forward(&s, k, &PerturbedConfig { n: samples, sigma, seed }).unwrap();
    assert_eq!(y, y_ref.tensor().data());

    let g: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.37).sin()).collect();
    let mut grad = vec![0.0f32; n];
    assert_eq!(unsafe { ptopk_perturbed_backward(ctx, g.as_ptr(), grad.as_mut_ptr()) }, PtopkStatus::Ok);
    let grad_ref = perturbed_topk_backward(&ctx_ref, &Tensor::new(vec![n, k], g).unwrap()).unwrap();
    assert_eq!(grad, grad_ref.data());

    unsafe { ptopk_perturbed_free(ctx) };
    unsafe { ptopk_perturbed_free(ptr::null_mut()) };
}

#[test]
fn extraction_with_hard_indicator_is_slicing() {
    let (h, w, c, patch, stride) = (8, 12, 2, 4, 4);
    let img: Vec<f32> = (0..h * w * c).map(|i| i as f32).collect();
    let geom = PatchGeometry::new((h, w, c), (patch, patch), (stride, stride)).unwrap();
    let n = geom.num_patches();
    let idx = hard_topk_indices(&(0..n).map(|i| ((i * 7) % n) as f32).collect::<Vec<_>>(), 2).unwrap();
    let y = indicator_from_indices(&idx, n).unwrap().into_tensor();
    let mut out = vec![0.0f32; 2 * patch * patch * c];
    let st = unsafe {
        ptopk_extract_patches(img.as_ptr(), h, w, c, patch, stride, y.data().as_ptr(), n, 2, out.as_mut_ptr())
    };
    assert_eq!(st, PtopkStatus::Ok);
    let img = Tensor::new(vec![h, w, c], img).unwrap();
    assert_eq!(out, slice_patches(&img, idx.as_slice(), &geom).unwrap().data());
}

#[test]
fn tensor_handle_reads_ptkt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ptkt");
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    ptopk::ptkt::save(&path, &t).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h: *mut PtopkTensor = ptr::null_mut();
    assert_eq!(unsafe { ptopk_tensor_load(c.as_ptr(), &mut h) }, PtopkStatus::Ok);
    unsafe {
        assert_eq!(ptopk_tensor_rank(h), 2);
        assert_eq!(ptopk_tensor_numel(h), 6);
        let mut dims = [0usize; 2];
        assert_eq!(ptopk_tensor_shape(h, dims.as_mut_ptr(), 2), PtopkStatus::Ok);
        assert_eq!(dims, [2, 3]);
        assert_eq!(ptopk_tensor_shape(h, dims.as_mut_ptr(), 1), PtopkStatus::Shape);
        assert_eq!(std::slice::from_raw_parts(ptopk_tensor_data(h), 6), t.data());
        ptopk_tensor_free(h);
    }

    let missing = CString::new(dir.path().join("none.ptkt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ptopk_tensor_load(missing.as_ptr(), &mut h) }, PtopkStatus::Io);
    std::fs::write(&path, b"PTKT\x02").unwrap();
    assert_eq!(unsafe { ptopk_tensor_load(c.as_ptr(), &mut h) }, PtopkStatus::Format);
    assert!(last_error().contains("version"), "{}", last_error());
}

#[test]
fn model_predicts_like_library() {
    let cfg = ModelConfig {
        image_h: 16,
        image_w: 16,
        hidden: 8,
        classes: 3,
        ..Default::default()
    };
    let model = Model::init(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model).unwrap();

    let c = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut m: *mut PtopkModel = ptr::null_mut();
    assert_eq!(unsafe { ptopk_model_load(c.as_ptr(), &mut m) }, PtopkStatus::Ok);
    let mut hwc = [0usize; 3];
    unsafe {
        assert_eq!(ptopk_model_input_shape(m, hwc.as_mut_ptr()), PtopkStatus::Ok);
        assert_eq!(ptopk_model_num_classes(m), 3);
        assert_eq!(ptopk_model_k(m), 2);
    }
    assert_eq!(hwc, [16, 16, 1]);

    let img: Vec<f32> = (0..256).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let (mut logits, mut class, mut picks) = ([0.0f32; 3], 0usize, [0usize; 2]);
    let st = unsafe {
        ptopk_model_predict(m, img.as_ptr(), img.len(), logits.as_mut_ptr(), &mut class, picks.as_mut_ptr())
    };
    assert_eq!(st, PtopkStatus::Ok);
    let pred = model.predict(&Tensor::new(vec![16, 16, 1], img.clone()).unwrap()).unwrap();
    assert_eq!(logits, pred.logits.data());
    assert_eq!(class, pred.class());
    let hard = hard_topk_indices(pred.scores.data(), 2).unwrap();
    assert_eq!(picks, hard.as_slice());

    let st = unsafe { ptopk_model_predict(m, img.as_ptr(), 10, logits.as_mut_ptr(), &mut class, ptr::null_mut()) };
    assert_eq!(st, PtopkStatus::Shape);
    unsafe { ptopk_model_free(m) };
}

#[test]
fn header_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{include}/ptopk.h")).unwrap();
    for name in ["ptopk_hard_topk", "ptopk_perturbed_forward", "ptopk_model_predict", "PTOPK_STATUS_OK"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ptopk.h\"\n\
         int main(void) {\n\
           float s[3] = {0.1f, 0.3f, 0.2f}; size_t idx[2];\n\
           PtopkStatus st = ptopk_hard_topk(s, 3, 2, idx);\n\
           PtopkModel *m = NULL; PtopkPerturbed *p = NULL;\n\
           ptopk_model_free(m); ptopk_perturbed_free(p);\n\
           return st == PTOPK_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include]).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C syntax check: {cc} unavailable ({e})"),
    }
}

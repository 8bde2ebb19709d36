use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use nodulenet_ffi::*;

const TINY: &str = r#"
[network]
input_shape = [3, 8, 8]
channels_per_stage = [2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2]
pool_positions = [2]
upsample_positions = [12]
fc_hidden = 4

[synth]
patch_shape = [3, 8, 8]
radius_range = [1, 1]
"#;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { nn_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn create() -> *mut NnNet {
    let cfg = CString::new(TINY).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { nn_net_create(cfg.as_ptr(), &mut net) }, NnStatus::Ok, "{}", last_error());
    assert!(!net.is_null());
    net
}

#[test]
fn predict_save_load_round_trip() {
    let net = create();
    let mut shape = [0usize; 3];
    assert_eq!(unsafe { nn_net_input_shape(net, shape.as_mut_ptr()) }, NnStatus::Ok);
    assert_eq!(shape, [3, 8, 8]);
    let per = 192;
    let patches: Vec<f32> = (0..3 * per).map(|i| (i % 17) as f32 / 17.0).collect();
    let (mut probs, mut masks) = (vec![0.0; 3], vec![7u8; 3 * per]);
    let status = unsafe { nn_net_predict(net, patches.as_ptr(), 3, 0.5, probs.as_mut_ptr(), masks.as_mut_ptr()) };
    assert_eq!(status, NnStatus::Ok, "{}", last_error());
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(masks.iter().all(|&m| m <= 1));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.ndlw").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nn_net_save(net, path.as_ptr()) }, NnStatus::Ok);
    let cfg = CString::new(TINY).unwrap();
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { nn_net_load(path.as_ptr(), cfg.as_ptr(), &mut back) }, NnStatus::Ok);
    let (mut probs2, mut masks2) = (vec![0.0; 3], vec![0u8; 3 * per]);
    unsafe { nn_net_predict(back, patches.as_ptr(), 3, 0.5, probs2.as_mut_ptr(), masks2.as_mut_ptr()) };
    assert_eq!(probs, probs2);
    assert_eq!(masks, masks2);
    unsafe {
        nn_net_free(net);
        nn_net_free(back);
        nn_net_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut net = ptr::null_mut();
    let bad = CString::new("[network]\nchannels_per_stage = [1]\n").unwrap();
    assert_eq!(unsafe { nn_net_create(bad.as_ptr(), &mut net) }, NnStatus::Config);
    assert!(last_error().contains("14"));
    let unknown = CString::new("nonsense = 1\n").unwrap();
    assert_eq!(unsafe { nn_net_create(unknown.as_ptr(), &mut net) }, NnStatus::Config);
    assert_eq!(unsafe { nn_net_create(ptr::null(), ptr::null_mut()) }, NnStatus::NullPointer);

    let missing = CString::new("/nonexistent/w.ndlw").unwrap();
    assert_eq!(unsafe { nn_net_load(missing.as_ptr(), ptr::null(), &mut net) }, NnStatus::Io);
    assert!(net.is_null());

    let net = create();
    let mut probs = [0.0];
    let mut masks = [0u8; 192];
    let status = unsafe { nn_net_predict(net, ptr::null(), 1, 0.5, probs.as_mut_ptr(), masks.as_mut_ptr()) };
    assert_eq!(status, NnStatus::NullPointer);
    let patch = [0.0f32; 192];
    let status = unsafe { nn_net_predict(net, patch.as_ptr(), 1, 1.5, probs.as_mut_ptr(), masks.as_mut_ptr()) };
    assert_eq!(status, NnStatus::Config);
    unsafe { nn_net_free(net) };
}

#[test]
fn metrics() {
    let (a, b) = ([1u8, 1, 0, 0], [1u8, 0, 1, 0]);
    let mut d = 0.0;
    assert_eq!(unsafe { nn_dice(a.as_ptr(), b.as_ptr(), 4, &mut d) }, NnStatus::Ok);
    assert_eq!(d, 0.5);

    let scores = [0.9, 0.8, 0.3, 0.2];
    let labels = [1u8, 0, 1, 0];
    let mut s = 0.0;
    assert_eq!(unsafe { nn_sensitivity(scores.as_ptr(), labels.as_ptr(), 4, 0.5, &mut s) }, NnStatus::Ok);
    assert_eq!(s, 0.5);
    let none = [0u8; 4];
    assert_eq!(
        unsafe { nn_sensitivity(scores.as_ptr(), none.as_ptr(), 4, 0.5, &mut s) },
        NnStatus::UndefinedMetric
    );

    // One scan, positives ranked first: full sensitivity at every rate.
    let scans = [0u32; 4];
    let ranked = [1u8, 1, 0, 0];
    let mut f = 0.0;
    assert_eq!(
        unsafe { nn_froc_score(scores.as_ptr(), ranked.as_ptr(), scans.as_ptr(), 4, &mut f) },
        NnStatus::Ok
    );
    assert_eq!(f, 1.0);
}

#[test]
fn last_error_truncates() {
    let mut out = 0.0;
    let a = [1u8];
    assert_eq!(unsafe { nn_dice(a.as_ptr(), ptr::null(), 1, &mut out) }, NnStatus::NullPointer);
    let full = unsafe { nn_last_error(ptr::null_mut(), 0) };
    assert!(full > 4);
    let mut buf = [0xffu8; 5];
    assert_eq!(unsafe { nn_last_error(buf.as_mut_ptr().cast(), 5) }, full);
    assert_eq!(buf[4], 0);
}

#[test]
fn header_declares_the_interface_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/nodulenet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "typedef struct NnNet NnNet",
        "NN_STATUS_OK = 0",
        "nn_net_create",
        "nn_net_load",
        "nn_net_save",
        "nn_net_predict",
        "nn_net_free",
        "nn_dice",
        "nn_sensitivity",
        "nn_froc_score",
        "nn_last_error",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

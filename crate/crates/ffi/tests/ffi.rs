use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use simulstream::codec::{CodebookStack, CodecConfig, Latents};
use simulstream::streams::AudioVocab;
use simulstream::inference::{SamplingConfig, Session};
use simulstream::model::{ModelConfig, RqTransformer};
use simulstream_ffi::*;

fn tiny_model() -> RqTransformer {
    RqTransformer::new(ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        context_frames: 32,
        d_depth: 8,
        depth_ffn_dim: 16,
        levels: 2,
        text_vocab: 12,
        audio_vocab: AudioVocab::new(8).size(),
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = ss_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn session_matches_core_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rqt");
    let model = tiny_model();
    model.save(&path).unwrap();
    let model = Arc::new(model);

    let mut reference = Session::new(Arc::clone(&model), SamplingConfig::greedy(), 0).unwrap();
    let source: Vec<[u16; 2]> = (0..10).map(|t| [(t % 8 + 1) as u16, (t * 3 % 8 + 1) as u16]).collect();

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ss_model_load(cpath(&path).as_ptr(), &mut m), SsStatus::Ok);
        assert_eq!(ss_model_levels(m), 2);
        assert_eq!(ss_model_num_parameters(m), model.num_parameters() as u64);
        let mut s = ptr::null_mut();
        assert_eq!(ss_session_new(m, true, 0, &mut s), SsStatus::Ok);
        // the session holds its own reference
        ss_model_free(m);

        for frame in &source {
            let want = reference.step(frame).unwrap();
            let mut text = 0u16;
            let mut audio = [0u16; 2];
            assert_eq!(ss_session_step(s, frame.as_ptr(), 2, &mut text, audio.as_mut_ptr()), SsStatus::Ok);
            assert_eq!(text, want.text);
            assert_eq!(audio.to_vec(), want.audio);
        }
        assert_eq!(ss_session_end_source(s), SsStatus::Ok);
        let mut state = SsSessionState::Running;
        assert_eq!(ss_session_state(s, &mut state), SsStatus::Ok);
        assert_eq!(state, SsSessionState::SourceEnded);
        let eos = ss_session_input_eos(s);
        assert_eq!(eos, AudioVocab::new(8).input_eos());

        let mut audio = [0u16; 3];
        let mut text = 0u16;
        assert_eq!(ss_session_step(s, [eos, eos, eos].as_ptr(), 3, &mut text, audio.as_mut_ptr()), SsStatus::InvalidArgument);
        assert!(last_error().contains("levels"));
        ss_session_free(s);
    }
}

#[test]
fn null_and_missing_inputs_report_status() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(ss_model_load(ptr::null(), &mut m), SsStatus::NullPointer);
        assert!(m.is_null());
        let missing = CString::new("/nonexistent/model.rqt").unwrap();
        assert_eq!(ss_model_load(missing.as_ptr(), &mut m), SsStatus::Io);
        assert!(!last_error().is_empty());

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.rqt");
        std::fs::write(&junk, b"not a model").unwrap();
        assert_eq!(ss_model_load(cpath(&junk).as_ptr(), &mut m), SsStatus::Format);

        let mut s = ptr::null_mut();
        assert_eq!(ss_session_new(ptr::null(), true, 0, &mut s), SsStatus::NullPointer);
        assert_eq!(ss_session_end_source(ptr::null_mut()), SsStatus::NullPointer);
        assert_eq!(ss_model_levels(ptr::null()), 0);
        ss_model_free(ptr::null_mut());
        ss_session_free(ptr::null_mut());
        ss_codec_free(ptr::null_mut());
    }
}

#[test]
fn codec_encode_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.rvq");
    let config = CodecConfig { num_levels: 3, codebook_size: 8, latent_dim: 4, ..CodecConfig::default() };
    let tables = (0..3).map(|q| (0..32).map(|i| (((i * 5 + q * 3) % 13) as f32 - 6.0) / (2.0 + q as f32)).collect()).collect();
    let stack = CodebookStack::from_entries(config, tables).unwrap();
    let mut f = std::fs::File::create(&path).unwrap();
    stack.write_to(&mut f).unwrap();
    drop(f);

    let data: Vec<f32> = (0..20).map(|i| ((i * 7 % 11) as f32 - 5.0) / 3.0).collect();
    let want = stack.encode(&Latents::new(5, 4, data.clone()).unwrap()).unwrap();
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(ss_codec_load(cpath(&path).as_ptr(), &mut c), SsStatus::Ok);
        assert_eq!(ss_codec_levels(c), 3);
        let mut out = vec![0u16; 15];
        assert_eq!(ss_codec_encode(c, data.as_ptr(), 5, 4, out.as_mut_ptr(), out.len()), SsStatus::Ok);
        assert_eq!(out, want.tokens);
        assert_eq!(ss_codec_encode(c, data.as_ptr(), 5, 4, out.as_mut_ptr(), 14), SsStatus::InvalidArgument);
        assert_eq!(ss_codec_encode(c, data.as_ptr(), 4, 5, out.as_mut_ptr(), 12), SsStatus::InvalidArgument);
        ss_codec_free(c);
    }
}

#[test]
fn metrics_through_the_abi() {
    unsafe {
        let mut v = 0.0;
        // source 4 s, 4 reference words, emissions at 1..4 s: lags 1,1,1,1
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ss_laal(d.as_ptr(), 4, 4.0, 4, &mut v), SsStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12, "{v}");
        assert_eq!(ss_laal(d.as_ptr(), 4, 0.0, 4, &mut v), SsStatus::Config);
        assert_eq!(ss_laal(ptr::null(), 0, 4.0, 4, &mut v), SsStatus::InvalidArgument);

        let h = CString::new("the cat sat on the mat").unwrap();
        assert_eq!(ss_bleu(h.as_ptr(), h.as_ptr(), &mut v), SsStatus::Ok);
        assert!((v - 100.0).abs() < 1e-9);
        let r = CString::new("a dog ran far away now").unwrap();
        assert_eq!(ss_bleu(h.as_ptr(), r.as_ptr(), &mut v), SsStatus::Ok);
        assert!(v.abs() < 1e-9);
        assert_eq!(ss_bleu(ptr::null(), r.as_ptr(), &mut v), SsStatus::NullPointer);
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(ss_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/simulstream.h")).unwrap();
    for name in ["ss_model_load", "ss_session_step", "ss_codec_encode", "ss_laal", "ss_bleu", "SS_STATUS_NULL_POINTER", "typedef struct SsSession SsSession"] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

//! A synthetic participant drives a real service over TCP.

use std::sync::Arc;

use colorvib_client::Client;
use colorvib_core::psychometry::{Condition, Probability, TableKey, ThresholdTable, DIAMETERS_MM, ECCENTRICITIES_MM};
use colorvib_core::session::api::ResponsePayload;
use colorvib_core::session::calibration::CalibrationInput;
use colorvib_core::session::clock::ManualClock;
use colorvib_core::session::config::{GuidanceImage, SessionConfig};
use colorvib_core::session::log::{serialize_log, SessionLog};
use colorvib_core::session::plan::StudyKind;
use colorvib_core::session::{Session, SessionEnv, SessionPhase};
use colorvib_core::stimulus::DisplayProfile;
use colorvib_service::{bind, serve, AppState};

fn config(dir: &std::path::Path) -> SessionConfig {
    let img_path = dir.join("scene.png");
    image::RgbImage::from_fn(160, 100, |x, y| image::Rgb([(x + y) as u8, 100, 150]))
        .save(&img_path)
        .unwrap();
    let mut table = ThresholdTable::new();
    for condition in [Condition::Awareness, Condition::Discomfort] {
        for probability in [Probability::P50, Probability::P75] {
            for d_mm in DIAMETERS_MM {
                for l_mm in ECCENTRICITIES_MM {
                    let key = TableKey {
                        condition,
                        probability,
                        d_mm,
                        l_mm,
                    };
                    table.insert(key, 12.0 + f64::from(d_mm) / 20.0).unwrap();
                }
            }
        }
    }
    let table_path = dir.join("table.csv");
    table.write_csv(std::fs::File::create(&table_path).unwrap()).unwrap();
    let mut cfg = SessionConfig {
        log_dir: dir.join("logs"),
        display: DisplayProfile {
            width_px: 384,
            height_px: 216,
            ..DisplayProfile::lcd_42in_4k()
        },
        ..SessionConfig::default()
    };
    cfg.guidance.table = Some(table_path);
    cfg.guidance.images = (0..6)
        .map(|_| GuidanceImage {
            path: img_path.clone(),
            roi_x_px: 40.0,
            roi_y_px: 50.0,
            roi_diameter_mm: 44.0,
            vibration_diameter_mm: 80.0,
        })
        .collect();
    cfg
}

async fn spawn(cfg: SessionConfig, clock: Arc<ManualClock>) -> (Client, tokio::sync::oneshot::Sender<()>) {
    let state = AppState::new(cfg, clock).unwrap();
    let listener = bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));
    (Client::new(&format!("http://{addr}")), tx)
}

#[tokio::test]
async fn calibration_and_one_guidance_trial_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let clock = Arc::new(ManualClock::new());
    let (client, stop) = spawn(cfg.clone(), clock.clone()).await;

    assert!(client.state().await.unwrap().session.is_none());
    let started = client.start("synthetic", StudyKind::Guidance, 21, false).await.unwrap();
    assert_eq!(started.session.phase, SessionPhase::Calibration);

    // each ratio: a few presses in both directions, then accept
    let presses = [3i32, -2, 0, 5, -1];
    for (i, &n) in presses.iter().enumerate() {
        let before = client.state().await.unwrap().session.unwrap().calibration.w;
        assert_eq!(before, 0.5);
        let input = if n >= 0 { CalibrationInput::Increase } else { CalibrationInput::Decrease };
        let mut w = before;
        for _ in 0..n.abs() {
            clock.advance(0.2);
            let out = client.calibration_step(input).await.unwrap();
            assert!(((out.outcome.state.w() - w).abs() - 0.02).abs() < 1e-12);
            w = out.outcome.state.w();
        }
        clock.advance(0.2);
        let out = client.calibration_step(CalibrationInput::Accept).await.unwrap();
        assert_eq!(out.outcome.inverted_flash_ms, Some(100));
        assert_eq!(out.outcome.accepted.unwrap().w_steps, n);
        assert_eq!(out.outcome.complete, i == 4);
        let flash = out.session.stimulus.unwrap();
        assert!(flash.id.starts_with("inv-"));
        let png = client.stimulus_frame(&flash.id, false).await.unwrap();
        assert_eq!(&png[1..4], b"PNG");
        clock.advance(0.1);
    }

    let state = client.state().await.unwrap().session.unwrap();
    assert_eq!(state.phase, SessionPhase::FixationCross);
    let err = client.advance().await.unwrap_err();
    assert_eq!(err.api_code(), Some("sequence_violation"));
    clock.advance(1.0);
    assert_eq!(client.current_trial().await.unwrap().phase, SessionPhase::TargetPreview);
    clock.advance(0.8);
    let searching = client.advance().await.unwrap();
    assert_eq!(searching.session.phase, SessionPhase::Search);
    let id = searching.session.stimulus.unwrap().id;
    client.stimulus_frame(&id, true).await.unwrap();
    clock.advance(4.5);
    client.respond(ResponsePayload::Click { x: 41.0, y: 52.0 }).await.unwrap();
    let err = client.questionnaire(0, 3).await.unwrap_err();
    assert_eq!(err.api_code(), Some("invalid_likert"));
    clock.advance(3.0);
    let done = client.questionnaire(5, 2).await.unwrap();
    assert_eq!(done.session.completed, 1);
    let _ = stop.send(());

    let path = dir.path().join("logs/synthetic-guidance.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let (_, loaded) = SessionLog::open(&path).unwrap();
    let mut env = SessionEnv::new(cfg.protocol.clone());
    env.rois = vec![
        colorvib_core::session::trial::RoiDisk {
            center: colorvib_core::gaze::Point2::new(40.0, 50.0),
            radius_px: 1.0,
        };
        6
    ];
    let replayed = Session::replay(loaded.header.clone(), &loaded.entries, env).unwrap();
    assert_eq!(replayed.calibration().fits.iter().map(|f| f.w_steps).collect::<Vec<_>>(), presses.to_vec());
    assert_eq!(replayed.records().len(), 1);
    assert_eq!(serialize_log(replayed.header(), &replayed.log_entries()).unwrap(), text);
}

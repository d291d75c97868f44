use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use colorvib_core::colorimetry;
use colorvib_core::gaze;
use colorvib_core::psychometry::{
    self, Condition, PerceptState, Probability, TableKey, ThresholdTable, TrialResponse, UserCalibration, DIAMETERS_MM,
    ECCENTRICITIES_MM, RATIO_LEVELS,
};
use colorvib_core::session::api::ResponsePayload;
use colorvib_core::session::calibration::CalibrationInput;
use colorvib_core::session::config::ProtocolConfig;
use colorvib_core::session::log::SessionHeader;
use colorvib_core::session::plan::{StudyKind, TrialSpec};
use colorvib_core::session::{Session, SessionEnv};
use colorvib_core::stimulus::{
    self, DisplayProfile, GuidanceCondition, GuidanceOptions, RoiSpec, ThresholdStimulusOptions,
};
use colorvib_core::vibration::{self, EllipseCatalog};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_colorvib"));
    cmd.env_remove("COLORVIB_CONFIG").env_remove("COLORVIB_URL").env_remove("COLORVIB_BIND");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_profile() -> DisplayProfile {
    DisplayProfile {
        width_px: 480,
        height_px: 270,
        ..DisplayProfile::lcd_42in_4k()
    }
}

fn write_profile(dir: &Path) -> PathBuf {
    let p = dir.join("profile.toml");
    std::fs::write(&p, toml_profile(&small_profile())).unwrap();
    p
}

fn toml_profile(p: &DisplayProfile) -> String {
    format!(
        "width_mm = {}\nheight_mm = {}\nwidth_px = {}\nheight_px = {}\nviewing_distance_mm = {}\nrefresh_hz = {}\n",
        p.width_mm, p.height_mm, p.width_px, p.height_px, p.viewing_distance_mm, p.refresh_hz
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pair_matches_library() {
    let out = run(&["pair", "--x", "0.305", "--y", "0.323", "--r", "20", "--w", "0.6"]);
    let v = stdout_json(&out);
    let catalog = EllipseCatalog::bundled();
    let pair = vibration::weighted_pair(catalog.base(), 20.0, 0.6, 0.4).unwrap();
    let plus = colorimetry::xyy_to_srgb8(pair.plus_xyy()).unwrap().to_array();
    let minus = colorimetry::xyy_to_srgb8(pair.minus_xyy()).unwrap().to_array();
    assert_eq!(v["plus"]["srgb8"], serde_json::json!(plus));
    assert_eq!(v["minus"]["srgb8"], serde_json::json!(minus));
    assert_eq!(v["plus"]["x"].as_f64().unwrap(), pair.plus_xyy().chroma.x);
    assert_eq!(v["minus"]["y"].as_f64().unwrap(), pair.minus_xyy().chroma.y);
    assert!(v["gamut_margin"].as_f64().unwrap() >= 0.0);
}

#[test]
fn pair_rejects_weight_outside_open_interval() {
    let out = run(&["pair", "--x", "0.305", "--y", "0.323", "--r", "20", "--w", "1.2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn pair_out_of_gamut_reports_max_ratio() {
    let out = run(&["pair", "--x", "0.305", "--y", "0.323", "--r", "500"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let max = vibration::max_gamut_ratio(EllipseCatalog::bundled().base(), 0.5, 0.4).unwrap();
    assert!(err.contains(&format!("{max:.4}")), "{err}");
}

#[test]
fn convert_base_color() {
    let v = stdout_json(&run(&["convert", "--x", "0.305", "--y", "0.323", "--Y", "0.4"]));
    assert_eq!(v["srgb8"], serde_json::json!([166, 170, 175]));
}

#[test]
fn help_states_units_for_geometric_flags() {
    for sub in ["threshold-stimulus", "stimulus", "gaze", "client click"] {
        let mut args: Vec<&str> = sub.split(' ').collect();
        args.push("--help");
        let out = run(&args);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        // a flag's description may sit on the following lines
        let mut blocks: Vec<String> = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.starts_with('-') {
                blocks.push(line.to_string());
            } else if let Some(last) = blocks.last_mut() {
                last.push(' ');
                last.push_str(line);
            }
        }
        for block in blocks.iter().filter(|b| b.starts_with("--")) {
            let flag = block.split_whitespace().next().unwrap();
            if ["-mm", "-px", "-deg"].iter().any(|u| flag.ends_with(u)) {
                assert!(
                    ["millimeters", "pixels", "degrees"].iter().any(|u| block.contains(u)),
                    "{sub}: {block}"
                );
            }
        }
    }
}

#[test]
fn threshold_stimulus_is_byte_identical_to_library() {
    let dir = tempfile::tempdir().unwrap();
    let profile = write_profile(dir.path());
    let out_dir = dir.path().join("out");
    let out = run(&[
        "threshold-stimulus", "--r", "30", "--w", "0.55", "--d-mm", "80", "--l-mm", "121", "--vibrating", "2",
        "--profile", s(&profile), "--out-dir", s(&out_dir),
    ]);
    stdout_json(&out);
    let pair = stimulus::render_threshold_stimulus(
        &small_profile(),
        EllipseCatalog::bundled().base(),
        30.0,
        0.55,
        80.0,
        121.0,
        Some(2),
        &ThresholdStimulusOptions::default(),
    )
    .unwrap();
    assert_eq!(std::fs::read(out_dir.join("frame_a.png")).unwrap(), stimulus::encode_png(&pair.frame_a).unwrap());
    assert_eq!(std::fs::read(out_dir.join("frame_b.png")).unwrap(), stimulus::encode_png(&pair.frame_b).unwrap());
    let meta: Value = serde_json::from_slice(&std::fs::read(out_dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta, serde_json::to_value(&pair.metadata).unwrap());
}

#[test]
fn threshold_stimulus_px_flags_match_mm_flags() {
    let dir = tempfile::tempdir().unwrap();
    let profile = write_profile(dir.path());
    let scale = small_profile().px_per_mm().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let d_px = format!("{}", 100.0 * scale);
    let l_px = format!("{}", 71.0 * scale);
    stdout_json(&run(&[
        "threshold-stimulus", "--r", "10", "--d-mm", "100", "--l-mm", "71", "--vibrating", "4", "--profile",
        s(&profile), "--out-dir", s(&a),
    ]));
    stdout_json(&run(&[
        "threshold-stimulus", "--r", "10", "--d-px", &d_px, "--l-px", &l_px, "--vibrating", "4", "--profile",
        s(&profile), "--out-dir", s(&b),
    ]));
    for f in ["frame_a.png", "frame_b.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn threshold_stimulus_needs_one_diameter_flag() {
    let out = run(&["threshold-stimulus", "--r", "10", "--out-dir", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["threshold-stimulus", "--r", "10", "--d-mm", "80", "--d-px", "40", "--out-dir", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}

fn full_table() -> ThresholdTable {
    let mut table = ThresholdTable::new();
    for condition in Condition::ALL {
        for probability in Probability::ALL {
            for d_mm in DIAMETERS_MM {
                for l_mm in ECCENTRICITIES_MM {
                    let base = if condition == Condition::Awareness { 8.0 } else { 30.0 };
                    let p = if probability == Probability::P75 { 3.0 } else { 0.0 };
                    let key = TableKey {
                        condition,
                        probability,
                        d_mm,
                        l_mm,
                    };
                    table.insert(key, base + p + f64::from(l_mm) / 40.0).unwrap();
                }
            }
        }
    }
    table
}

fn calibration() -> UserCalibration {
    UserCalibration {
        participant: "p".into(),
        fits: [(10, 0.5), (20, 0.52), (30, 0.54), (40, 0.56), (50, 0.58)].into_iter().collect(),
    }
}

#[test]
fn guidance_stimulus_is_byte_identical_to_library() {
    let dir = tempfile::tempdir().unwrap();
    let profile = write_profile(dir.path());
    let img_path = dir.path().join("scene.png");
    let raster = image::RgbImage::from_fn(200, 120, |x, y| image::Rgb([(70 + x / 2) as u8, (80 + y) as u8, 120]));
    raster.save(&img_path).unwrap();
    let table_path = dir.path().join("table.csv");
    full_table().write_csv(std::fs::File::create(&table_path).unwrap()).unwrap();
    let cal_path = dir.path().join("cal.json");
    std::fs::write(&cal_path, serde_json::to_string(&calibration()).unwrap()).unwrap();

    for (flag, condition) in [
        ("unobtrusive", GuidanceCondition::UnobtrusiveVibration),
        ("obtrusive", GuidanceCondition::ObtrusiveVibration),
        ("explicit", GuidanceCondition::ExplicitCircle),
        ("unmodified", GuidanceCondition::Unmodified),
    ] {
        let out_dir = dir.path().join(flag);
        let out = run(&[
            "stimulus", "--image", s(&img_path), "--roi-x-px", "60", "--roi-y-px", "50", "--condition", flag,
            "--table", s(&table_path), "--calibration", s(&cal_path), "--profile", s(&profile), "--out-dir",
            s(&out_dir),
        ]);
        stdout_json(&out);
        let prepared = stimulus::prepare_image(&raster).unwrap();
        let pair = stimulus::render_guidance(
            &prepared,
            &RoiSpec::new((60.0, 50.0)),
            condition,
            &full_table(),
            &calibration(),
            &small_profile(),
            EllipseCatalog::bundled().base(),
            &GuidanceOptions::default(),
        )
        .unwrap();
        assert_eq!(std::fs::read(out_dir.join("frame_a.png")).unwrap(), stimulus::encode_png(&pair.frame_a).unwrap());
        assert_eq!(std::fs::read(out_dir.join("frame_b.png")).unwrap(), stimulus::encode_png(&pair.frame_b).unwrap());
    }
}

#[test]
fn vibrating_guidance_requires_table() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("scene.png");
    image::RgbImage::from_pixel(50, 50, image::Rgb([128, 128, 128])).save(&img_path).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "stimulus", "--image", s(&img_path), "--roi-x-mm", "10", "--roi-y-mm", "10", "--condition", "obtrusive",
        "--out-dir", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
}

fn synthetic_responses(cells: &[(u32, u32)]) -> Vec<TrialResponse> {
    let logistic = |r: f64, mid: f64| 1.0 / (1.0 + (-(r - mid) * 0.25).exp());
    let mut out = Vec::new();
    for &(d_mm, l_mm) in cells {
        let location = (l_mm > 0).then_some(1);
        for r in RATIO_LEVELS {
            let r = f64::from(r);
            for k in 0..10 {
                let u = (f64::from(k) + 0.5) / 10.0;
                let state = if u < logistic(r, 34.0) {
                    PerceptState::ClearlyFlickering
                } else if u < logistic(r, 18.0) {
                    PerceptState::DifferentNotFlickering
                } else {
                    PerceptState::SolidColor
                };
                out.push(TrialResponse {
                    r,
                    d_mm,
                    l_mm,
                    state,
                    location_chosen: location,
                    location_actual: location,
                    participant: "synthetic".into(),
                    latency_s: 1.0,
                });
            }
        }
    }
    out
}

fn write_responses(path: &Path, responses: &[TrialResponse]) {
    let mut buf = Vec::new();
    psychometry::write_responses(&mut buf, responses).unwrap();
    std::fs::write(path, buf).unwrap();
}

#[test]
fn fit_writes_library_table() {
    let dir = tempfile::tempdir().unwrap();
    let cells: Vec<(u32, u32)> = DIAMETERS_MM
        .iter()
        .flat_map(|&d| ECCENTRICITIES_MM.iter().map(move |&l| (d, l)))
        .collect();
    let responses = synthetic_responses(&cells);
    let resp_path = dir.path().join("responses.jsonl");
    write_responses(&resp_path, &responses);
    let table_path = dir.path().join("table.csv");
    let diag_path = dir.path().join("diag.jsonl");
    let out = run(&["fit", "--responses", s(&resp_path), "--out", s(&table_path), "--diagnostics", s(&diag_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let build = psychometry::build_table(&responses);
    let mut expected = Vec::new();
    build.table.write_csv(&mut expected).unwrap();
    assert_eq!(std::fs::read(&table_path).unwrap(), expected);
    assert_eq!(std::fs::read_to_string(&diag_path).unwrap().lines().count(), 24);
}

#[test]
fn fit_lists_failed_cells_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let resp_path = dir.path().join("responses.jsonl");
    write_responses(&resp_path, &synthetic_responses(&[(80, 0)]));
    let table_path = dir.path().join("table.csv");
    let out = run(&["fit", "--responses", s(&resp_path), "--out", s(&table_path)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d=100 l=171"), "{err}");
    assert!(!table_path.exists());
}

#[test]
fn fit_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let resp_path = dir.path().join("responses.jsonl");
    std::fs::write(&resp_path, "").unwrap();
    let table_path = dir.path().join("table.csv");
    let out = run(&["fit", "--responses", s(&resp_path), "--out", s(&table_path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!table_path.exists());
}

#[test]
fn gaze_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let samples = "t,x,y,valid\n0.0,10,10,1\n0.5,20,20,1\n1.0,30,30,0\n1.5,50,50,1\n2.0,60,40,1\n3.0,95,95,1\n";
    let markers = "t,c0x,c0y,c1x,c1y,c2x,c2y,c3x,c3y,d0x,d0y,d1x,d1y,d2x,d2y,d3x,d3y\n\
                   0.0,0,0,100,0,100,100,0,100,0,0,200,0,200,200,0,200\n";
    let trials = "trial,start_t,correct,latency_s,region_x,region_y,region_w,region_h\n\
                  0,0.0,1,1.2,0,0,200,200\n1,1.5,0,,0,0,200,200\n";
    let paths: Vec<PathBuf> = ["s.csv", "m.csv", "t.csv"].iter().map(|n| dir.path().join(n)).collect();
    for (p, text) in paths.iter().zip([samples, markers, trials]) {
        std::fs::write(p, text).unwrap();
    }
    let out_path = dir.path().join("metrics.csv");
    let out = run(&[
        "gaze", "--samples", s(&paths[0]), "--markers", s(&paths[1]), "--trials", s(&paths[2]), "--disk-radius-px",
        "15", "--out", s(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = gaze::analyze_trials(
        &gaze::read_samples(samples.as_bytes()).unwrap(),
        &gaze::read_markers(markers.as_bytes()).unwrap(),
        &gaze::read_trials(trials.as_bytes()).unwrap(),
        15.0,
        gaze::DEFAULT_TIME_LIMIT_S,
    )
    .unwrap();
    let mut expected = Vec::new();
    gaze::write_metrics(&mut expected, &metrics).unwrap();
    assert_eq!(std::fs::read(&out_path).unwrap(), expected);
    assert_eq!(metrics[0].completion_time_s, 1.2);
    assert_eq!(metrics[1].completion_time_s, 30.0);
}

#[test]
fn export_round_trips_a_session_log() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("p.jsonl");
    let env = SessionEnv::new(ProtocolConfig::default());
    let mut session = Session::start(SessionHeader::new("p07", StudyKind::Threshold, 3, 6), env, Some(&log_path)).unwrap();
    let mut t = 0.0;
    for _ in 0..5 {
        session.calibration_step(CalibrationInput::Decrease, t).unwrap();
        t += 0.5;
        session.calibration_step(CalibrationInput::Accept, t).unwrap();
        t += 0.5;
        session.tick(t);
    }
    for _ in 0..4 {
        t += 1.0;
        let Some(TrialSpec::Threshold(spec)) = session.active_trial().map(|a| a.spec) else { panic!() };
        let payload = ResponsePayload::Threshold {
            state: PerceptState::ClearlyFlickering,
            location: spec.vibrating_index,
        };
        session.respond(payload, t).unwrap();
    }
    let resp_path = dir.path().join("responses.jsonl");
    let cal_path = dir.path().join("cal.json");
    let v = stdout_json(&run(&[
        "export", "--log", s(&log_path), "--responses", s(&resp_path), "--calibration", s(&cal_path),
    ]));
    assert_eq!(v["threshold_responses"], 4);
    let responses = psychometry::read_responses(BufReader::new(std::fs::File::open(&resp_path).unwrap())).unwrap();
    let expected: Vec<_> = session.records().iter().filter_map(|r| r.to_response("p07")).collect();
    assert_eq!(responses, expected);
    let cal = UserCalibration::from_json(&std::fs::read_to_string(&cal_path).unwrap()).unwrap();
    assert_eq!(cal, session.user_calibration().unwrap());
}

#[test]
fn serve_fails_on_occupied_port() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["serve", "--bind", &addr])
        .env("COLORVIB_LOG_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&addr));
}

struct Served(std::process::Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_answers_the_cli_client() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("colorvib.toml");
    std::fs::write(
        &config,
        format!("bind = \"127.0.0.1:0\"\nlog_dir = \"logs\"\n\n[display]\n{}", toml_profile(&small_profile())),
    )
    .unwrap();
    let mut child = bin()
        .args(["serve"])
        .env("COLORVIB_CONFIG", &config)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _guard = Served(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let url = serde_json::from_str::<Value>(&line).unwrap()["listening"].as_str().unwrap().to_string();

    let client = |args: &[&str]| bin().arg("client").arg("--url").arg(&url).args(args).output().unwrap();
    assert_eq!(stdout_json(&client(&["state"])), serde_json::json!({"version": 1}));
    let started = stdout_json(&client(&["start", "--participant", "cli01", "--kind", "threshold", "--seed", "4"]));
    assert_eq!(started["session"]["phase"], "calibration");
    let stepped = stdout_json(&client(&["step", "increase"]));
    assert_eq!(stepped["outcome"]["state"]["w_steps"], 1);
    let id = stepped["session"]["stimulus"]["id"].as_str().unwrap().to_string();
    let png = dir.path().join("frame.png");
    stdout_json(&client(&["frame", "--id", &id, "--frame", "b", "--out", s(&png)]));
    assert_eq!(image::open(&png).unwrap().width(), 480);
    let refused = client(&["questionnaire", "--naturalness", "4", "--obtrusiveness", "4"]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("sequence_violation"));
    assert!(dir.path().join("logs/cli01-threshold.jsonl").exists());
}

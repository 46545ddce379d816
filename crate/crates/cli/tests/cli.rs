use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ontorec::demographic::UserRecord;
use ontorec::engine::Event;
use ontorec::eventlog::{encode_record, EventLog, EventLogRecord};
use ontorec::{ItemId, UserId};

fn ontorec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ontorec")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TABLE4: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/table4_items.jsonl");

#[test]
fn evaluate_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.csv"), "userid,itemid\n0,0\n0,1\n0,2\n").unwrap();
    fs::write(dir.path().join("t.csv"), "userid,itemid,rating\n0,0,5\n0,2,4\n").unwrap();
    let o = ontorec(&["evaluate", "--recs", "r.csv", "--truth", "t.csv", "--k", "3"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "0.8333");
    assert_eq!(row[1], "0.7500");
}

#[test]
fn evaluate_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.csv"), "userid,itemid\n0,0\n0,x\n").unwrap();
    fs::write(dir.path().join("t.csv"), "userid,itemid,rating\n0,0,5\n").unwrap();
    let o = ontorec(&["evaluate", "--recs", "r.csv", "--truth", "t.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("r.csv") && stderr(&o).contains("line 3"), "{}", stderr(&o));
    let o = ontorec(&["evaluate", "--recs", "r.csv", "--truth", "missing.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = ontorec(&["gen-data", "--users", "98", "--seed", "7", "--out", "d"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let d = dir.path().join("d");
    let users = fs::read_to_string(d.join("users.csv")).unwrap();
    assert_eq!(users.lines().count(), 99);
    assert_eq!(fs::read_to_string(d.join("preferences.csv")).unwrap().lines().count(), 99);
    let dense = fs::read_to_string(d.join("ratings_dense.csv")).unwrap();
    assert_eq!(dense.lines().count(), 99);
    assert_eq!(dense.lines().next().unwrap().split(',').count(), 30);
    assert!(fs::read_to_string(d.join("ratings.csv")).unwrap().starts_with("userid,itemid,rating\n"));

    let again = ontorec(&["gen-data", "--users", "98", "--seed", "7", "--out", "e"], dir.path());
    assert!(again.status.success());
    for f in ["users.csv", "preferences.csv", "ratings.csv", "ratings_dense.csv"] {
        assert_eq!(fs::read(d.join(f)).unwrap(), fs::read(dir.path().join("e").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bin_items_links_every_fixture_item() {
    let dir = tempfile::tempdir().unwrap();
    let o = ontorec(&["bin-items", "--items", TABLE4, "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("29 items, 29 linked"), "{}", stdout(&o));
    let report = fs::read_to_string(dir.path().join("b/links.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 29);
    let o = ontorec(&["bin-items", "--items", TABLE4, "--threshold", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["simulate", "--milestones", "98:0,98:64", "--deterministic", "--out", out];
    let a = ontorec(&args("a"), dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(ontorec(&args("b"), dir.path()).status.success());
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(fs::read(dir.path().join("a").join(&n)).unwrap(), fs::read(dir.path().join("b").join(&n)).unwrap());
    }
    let first = fs::read_to_string(dir.path().join("a/milestone_1_98u_0r.csv")).unwrap();
    assert_eq!(first.lines().count(), 2);
    assert_eq!(first.lines().next().unwrap().split(',').count(), 8);

    let o = ontorec(&["simulate", "--milestones", "98:0,50:0"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

fn write_log(path: &Path, skip: Option<u64>) {
    let mut text = String::new();
    for id in 0..3u32 {
        let user = UserRecord::new(id, 30, 2, 2, 2, "Male", "blue collar", "South Europe", "2Adlt").unwrap();
        let seq = u64::from(id) + 1;
        if Some(seq) != skip {
            let rec = EventLogRecord { seq, timestamp: 0, event: Event::UserCreated { user, selection: None } };
            text.push_str(&encode_record(&rec).unwrap());
        }
    }
    fs::write(path, text).unwrap();
    let (mut log, _) = EventLog::open(path).unwrap();
    log.append(Event::Rating { user: UserId(0), item: ItemId(2), rating: 4.0, timestamp: 1 }, 1).unwrap();
}

#[test]
fn replay_and_its_failure_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_log(&dir.path().join("ok.log"), None);
    let o = ontorec(&["replay", "--log", "ok.log", "--write-snapshot", "s.snap"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(summary["users"], 3);
    assert_eq!(summary["phase"], 2);

    let again = ontorec(&["replay", "--log", "ok.log", "--snapshot", "s.snap"], dir.path());
    let resumed: serde_json::Value = serde_json::from_str(stdout(&again).lines().next().unwrap()).unwrap();
    assert_eq!(resumed["state_sha256"], summary["state_sha256"]);

    write_log(&dir.path().join("gap.log"), Some(2));
    let o = ontorec(&["replay", "--log", "gap.log"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("expected sequence 2"), "{}", stderr(&o));

    let snap = fs::read_to_string(dir.path().join("s.snap")).unwrap();
    fs::write(dir.path().join("bad.snap"), snap.replacen("\"phase\":2", "\"phase\":3", 1)).unwrap();
    let o = ontorec(&["replay", "--log", "ok.log", "--snapshot", "bad.snap"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn usage_errors_and_help_examples() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ontorec(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(ontorec(&["evaluate"], dir.path()).status.code(), Some(1));
    assert_eq!(ontorec(&["--k", "0", "simulate"], dir.path()).status.code(), Some(1));
    for sub in ["gen-data", "bin-items", "simulate", "evaluate", "serve", "replay"] {
        let o = ontorec(&[sub, "--help"], dir.path());
        assert!(o.status.success());
        let text = stdout(&o);
        let examples = text.split("Examples:").nth(1).unwrap_or_else(|| panic!("{sub} help has no examples"));
        assert_eq!(examples.lines().filter(|l| l.trim_start().contains("ontorec ")).count(), 3, "{sub}");
    }
}

//! Drives the `archain` binary: a CA process, a node process and one-shot
//! client commands against them.

#![allow(dead_code)]

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

pub const SYNC_TOKEN: &str = "cluster-sync-token";
pub const PASSWORD: &str = "correct-horse-9";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_archain")
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    fn from(o: Output) -> Self {
        Self {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }

    /// Fields of the first structured record.
    pub fn fields(&self) -> HashMap<String, String> {
        parse_record(self.stdout.lines().next().unwrap_or(""))
    }

    pub fn records(&self) -> Vec<HashMap<String, String>> {
        self.stdout.lines().map(parse_record).collect()
    }

    #[track_caller]
    pub fn ok(self) -> Self {
        assert_eq!(
            self.code, 0,
            "stdout: {}\nstderr: {}",
            self.stdout, self.stderr
        );
        self
    }
}

pub fn parse_record(line: &str) -> HashMap<String, String> {
    line.split('\t')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Runs the binary with a clean environment apart from `env`.
pub fn run(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_clear().envs(env.iter().copied());
    if let Ok(path) = std::env::var("PATH") {
        cmd.env("PATH", path);
    }
    Run::from(cmd.output().expect("run archain"))
}

/// A long-running server process, killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
    pub log: PathBuf,
}

impl Server {
    pub fn spawn(args: &[&str], env: &[(&str, &str)], log: PathBuf) -> Self {
        let mut cmd = Command::new(bin());
        cmd.args(args)
            .env_clear()
            .envs(env.iter().copied())
            .stdout(Stdio::piped())
            .stderr(Stdio::from(File::create(&log).expect("log file")));
        let mut child = cmd.spawn().expect("spawn archain");
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("stdout"))
            .read_line(&mut line)
            .expect("read listening line");
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| {
                let _ = child.kill();
                panic!(
                    "server did not start: {line:?}\n{}",
                    std::fs::read_to_string(&log).unwrap_or_default()
                )
            })
            .to_string();
        Self { child, url, log }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct Member {
    pub username: String,
    pub user_id: u64,
    pub token: String,
    pub identity: PathBuf,
}

/// A CA, participants registered through it, and optionally a node.
pub struct Cluster {
    pub dir: PathBuf,
    pub ca: Server,
    pub root_token: String,
    pub node: Option<Server>,
    pub members: HashMap<String, Member>,
}

impl Cluster {
    pub fn ca_store(&self) -> PathBuf {
        self.dir.join("ca-store")
    }

    pub fn node_dir(&self) -> PathBuf {
        self.dir.join("node")
    }

    pub fn ledger(&self) -> PathBuf {
        self.node_dir().join("ledger.tsv")
    }

    pub fn start(dir: &Path) -> Self {
        let store = dir.join("ca-store");
        let store_s = store.to_str().unwrap();
        run(
            &[
                "ca",
                "init",
                "--dir",
                store_s,
                "--admin-user",
                "root",
                "--first-name",
                "Root",
                "--last-name",
                "Authority",
                "--sync-token",
                SYNC_TOKEN,
            ],
            &[("ARCHAIN_CA_ADMIN_PASSWORD", PASSWORD)],
        )
        .ok();
        let ca = Server::spawn(
            &["ca", "serve", "--dir", store_s, "--listen", "127.0.0.1:0"],
            &[],
            dir.join("ca.log"),
        );
        let root_token = run(
            &[
                "--ca",
                &ca.url,
                "--format",
                "structured",
                "login",
                "--username",
                "root",
            ],
            &[("ARCHAIN_PASSWORD", PASSWORD)],
        )
        .ok()
        .fields()["token"]
            .clone();
        Self {
            dir: dir.to_path_buf(),
            ca,
            root_token,
            node: None,
            members: HashMap::new(),
        }
    }

    /// Client invocation against this cluster in structured mode.
    pub fn cli(&self, args: &[&str]) -> Run {
        let mut full = vec!["--ca", self.ca.url.as_str(), "--format", "structured"];
        if let Some(n) = &self.node {
            full.extend(["--node", n.url.as_str()]);
        }
        full.extend_from_slice(args);
        run(&full, &[])
    }

    /// Same, acting as a registered member.
    pub fn as_member(&self, name: &str, args: &[&str]) -> Run {
        let m = &self.members[name];
        let mut full = vec![
            "--token",
            m.token.as_str(),
            "--identity",
            m.identity.to_str().unwrap(),
        ];
        full.extend_from_slice(args);
        self.cli(&full)
    }

    /// Registers an account, has the CA administrator assign `role`, and
    /// claims the key into `<name>.identity`.
    pub fn enroll(&mut self, name: &str, role: &str) -> u64 {
        let reg = self
            .cli(&[
                "register",
                "--username",
                name,
                "--password",
                PASSWORD,
                "--first-name",
                name,
                "--last-name",
                "Tester",
                "--organization",
                "Archive",
            ])
            .ok();
        let user_id: u64 = reg.fields()["user_id"].parse().unwrap();
        let id = user_id.to_string();
        self.cli(&[
            "--token",
            &self.root_token.clone(),
            "role",
            "set",
            "--user-id",
            &id,
            "--role",
            role,
        ])
        .ok();
        let token = run(
            &[
                "--ca",
                &self.ca.url,
                "--format",
                "structured",
                "login",
                "--username",
                name,
            ],
            &[("ARCHAIN_PASSWORD", PASSWORD)],
        )
        .ok()
        .fields()["token"]
            .clone();
        let identity = self.dir.join(format!("{name}.identity"));
        self.members.insert(
            name.to_string(),
            Member {
                username: name.to_string(),
                user_id,
                token,
                identity,
            },
        );
        self.as_member(name, &["identity", "claim"]).ok();
        user_id
    }

    pub fn start_node(&mut self, admin: &str) {
        let dir = self.node_dir();
        let identity = self.members[admin].identity.clone();
        let node = Server::spawn(
            &[
                "--ca",
                &self.ca.url,
                "--identity",
                identity.to_str().unwrap(),
                "node",
                "serve",
                "--dir",
                dir.to_str().unwrap(),
                "--listen",
                "127.0.0.1:0",
                "--ca-token",
                SYNC_TOKEN,
                "--poll-secs",
                "1",
                "--tick-secs",
                "1",
            ],
            &[],
            self.dir.join("node.log"),
        );
        self.node = Some(node);
        self.wait_for(Duration::from_secs(10), |c| {
            c.cli(&["node", "status"])
                .fields()
                .get("rows")
                .map(String::as_str)
                == Some("1")
        });
    }

    #[track_caller]
    pub fn wait_for(&self, timeout: Duration, mut done: impl FnMut(&Self) -> bool) {
        let start = Instant::now();
        while !done(self) {
            assert!(
                start.elapsed() < timeout,
                "condition not reached in {timeout:?}"
            );
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}

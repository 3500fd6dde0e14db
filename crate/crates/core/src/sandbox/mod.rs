//! Isolated execution of generated and submitted code against unit tests.
//!
//! Each run gets a fresh temporary working directory holding `solution.py`,
//! `tests.py` and the harness. The child runs in its own process group with
//! a cleared environment and rlimits, and is killed as a group on timeout.
//! Inside the child an audit hook refuses sockets, process spawning and file
//! access outside the working directory (the interpreter's own library paths
//! stay readable so imports work).

mod sanitize;

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ExecutionOutcome, Task, TaskStatus, TestResult};

pub use sanitize::sanitize_source;

const HARNESS: &str = include_str!("harness.py");
const MEMORY_LIMIT_BYTES: u64 = 1 << 30;
const MAX_MESSAGE_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxLimits {
    pub wall_timeout_ms: u64,
    pub max_output_bytes: usize,
    pub network_allowed: bool,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self { wall_timeout_ms: 10_000, max_output_bytes: 65_536, network_allowed: false }
    }
}

impl SandboxLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.wall_timeout_ms == 0 {
            return Err(SandboxError::InvalidLimits("wall_timeout_ms must be > 0".into()));
        }
        if self.network_allowed {
            return Err(SandboxError::InvalidLimits("network access cannot be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox setup failed: {0}")]
    SetupFailure(String),
    #[error("invalid sandbox limits: {0}")]
    InvalidLimits(String),
    #[error("task {0} is not functional")]
    TaskNotFunctional(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Interpreter executable for the teaching language.
    pub interpreter: String,
    pub interpreter_args: Vec<String>,
    /// Global cap on concurrently running child processes.
    pub max_concurrent: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: "python3".into(),
            interpreter_args: vec!["-I".into(), "-B".into(), "-S".into()],
            max_concurrent: 4,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n.max(1)), cond: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cond.notify_one();
    }
}

/// Handle for running code. Cheap to clone; clones share the concurrency cap.
#[derive(Clone)]
pub struct Sandbox {
    config: Arc<SandboxConfig>,
    permits: Arc<Semaphore>,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Self {
        let permits = Arc::new(Semaphore::new(config.max_concurrent));
        Self { config: Arc::new(config), permits }
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Runs `tests` against `solution`. Both are expected to be sanitized.
    pub fn run_solution_against_tests(
        &self,
        solution: &str,
        tests: &str,
        limits: &SandboxLimits,
    ) -> Result<ExecutionOutcome, SandboxError> {
        limits.validate()?;
        let _permit = self.permits.acquire();
        let workdir = tempfile::Builder::new()
            .prefix("taskgen-run-")
            .tempdir()
            .map_err(|e| SandboxError::SetupFailure(format!("creating working directory: {e}")))?;
        let write = |name: &str, body: &str| {
            std::fs::write(workdir.path().join(name), body)
                .map_err(|e| SandboxError::SetupFailure(format!("writing {name}: {e}")))
        };
        write("solution.py", solution)?;
        write("tests.py", tests)?;
        write("_harness.py", HARNESS)?;

        let mut cmd = Command::new(&self.config.interpreter);
        cmd.args(&self.config.interpreter_args)
            .arg("_harness.py")
            .current_dir(workdir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", workdir.path())
            .env("PYTHONIOENCODING", "utf-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let cpu_seconds = limits.wall_timeout_ms.div_ceil(1000) + 1;
        let fsize = (limits.max_output_bytes as u64).saturating_mul(4).max(1 << 20);
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                set_limit(libc::RLIMIT_AS, MEMORY_LIMIT_BYTES);
                set_limit(libc::RLIMIT_CORE, 0);
                set_limit(libc::RLIMIT_CPU, cpu_seconds);
                set_limit(libc::RLIMIT_FSIZE, fsize);
                // Fresh network namespace when permitted; the audit hook covers the rest.
                libc::unshare(libc::CLONE_NEWNET);
                Ok(())
            });
        }

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| {
            SandboxError::SetupFailure(format!("starting interpreter `{}`: {e}", self.config.interpreter))
        })?;
        let stdout = capture(child.stdout.take(), limits.max_output_bytes.max(1 << 20));
        let stderr = capture(child.stderr.take(), limits.max_output_bytes);

        let deadline = started + Duration::from_millis(limits.wall_timeout_ms);
        let (status, timed_out) = wait_until(&mut child, deadline)?;
        let wall_time_ms = started.elapsed().as_millis() as u64;
        kill_group(&child);

        let protocol = stdout.join().unwrap_or_default();
        let stderr = stderr.join().unwrap_or_default();
        let user_stdout = read_capped(&workdir.path().join("_stdout.txt"), limits.max_output_bytes);
        Ok(interpret(&protocol, user_stdout, stderr, status, timed_out, wall_time_ms, limits.max_output_bytes))
    }

    /// Runs a student's code against a functional task's tests. The model
    /// solution never enters the working directory.
    pub fn run_submission(
        &self,
        task: &Task,
        student_code: &str,
        limits: &SandboxLimits,
    ) -> Result<ExecutionOutcome, SandboxError> {
        if task.status != TaskStatus::Functional {
            return Err(SandboxError::TaskNotFunctional(task.id.clone()));
        }
        self.run_solution_against_tests(student_code, &task.unit_tests, limits)
    }
}

fn set_limit(resource: libc::__rlimit_resource_t, value: u64) {
    let lim = libc::rlimit { rlim_cur: value as libc::rlim_t, rlim_max: value as libc::rlim_t };
    // SAFETY: plain syscall on a stack value.
    unsafe {
        libc::setrlimit(resource, &lim);
    }
}

fn kill_group(child: &Child) {
    // The child leads its own process group, so this reaches grandchildren too.
    // SAFETY: signalling a process group we created; ESRCH is harmless.
    unsafe {
        libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
    }
}

fn wait_until(child: &mut Child, deadline: Instant) -> Result<(Option<ExitStatus>, bool), SandboxError> {
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Ok((Some(status), false)),
            Ok(None) => {}
            Err(e) => return Err(SandboxError::SetupFailure(format!("waiting for child: {e}"))),
        }
        if Instant::now() >= deadline {
            kill_group(child);
            let status = child.wait().ok();
            return Ok((status, true));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Drains a pipe on a thread, keeping at most `cap` bytes.
fn capture<R: Read + Send + 'static>(pipe: Option<R>, cap: usize) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let Some(mut pipe) = pipe else { return String::new() };
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

fn read_capped(path: &std::path::Path, cap: usize) -> String {
    let Ok(file) = std::fs::File::open(path) else { return String::new() };
    let mut kept = Vec::new();
    let _ = file.take(cap as u64).read_to_end(&mut kept);
    String::from_utf8_lossy(&kept).into_owned()
}

fn truncate_bytes(mut s: String, cap: usize) -> String {
    if s.len() > cap {
        let mut idx = cap;
        while !s.is_char_boundary(idx) {
            idx -= 1;
        }
        s.truncate(idx);
    }
    s
}

enum ProtocolLine {
    /// Both files loaded; `n` tests were collected.
    Ready(usize),
    Test(TestResult),
    Summary {
        passed: usize,
        total: usize,
    },
}

fn parse_line(line: &str) -> Option<ProtocolLine> {
    if let Some(n) = line.strip_prefix("READY ") {
        return n.parse().ok().map(ProtocolLine::Ready);
    }
    if let Some(rest) = line.strip_prefix("TEST ") {
        let (name, verdict) = rest.split_once(' ')?;
        if name.is_empty() {
            return None;
        }
        if verdict == "PASS" {
            return Some(ProtocolLine::Test(TestResult { name: name.into(), passed: true, message: String::new() }));
        }
        let message = verdict.strip_prefix("FAIL")?;
        if !(message.is_empty() || message.starts_with(' ')) {
            return None;
        }
        return Some(ProtocolLine::Test(TestResult {
            name: name.into(),
            passed: false,
            message: message.trim_start().chars().take(MAX_MESSAGE_CHARS).collect(),
        }));
    }
    let (passed, total) = line.strip_prefix("SUMMARY ")?.split_once('/')?;
    Some(ProtocolLine::Summary { passed: passed.parse().ok()?, total: total.parse().ok()? })
}

fn describe_exit(status: Option<ExitStatus>) -> String {
    match status {
        Some(s) => match (s.code(), s.signal()) {
            (Some(code), _) => format!("exit status {code}"),
            (None, Some(sig)) => format!("signal {sig}"),
            _ => "unknown status".into(),
        },
        None => "unknown status".into(),
    }
}

/// Turns raw child output into an outcome.
fn interpret(
    protocol: &str,
    stdout: String,
    stderr: String,
    status: Option<ExitStatus>,
    timed_out: bool,
    wall_time_ms: u64,
    cap: usize,
) -> ExecutionOutcome {
    let mut tests = Vec::new();
    let mut summary = None;
    let mut announced = None;
    for line in protocol.lines() {
        match parse_line(line) {
            Some(ProtocolLine::Ready(n)) if announced.is_none() => announced = Some(n),
            Some(ProtocolLine::Test(t)) if summary.is_none() => tests.push(t),
            Some(ProtocolLine::Summary { passed, total }) if summary.is_none() => summary = Some((passed, total)),
            _ => {}
        }
    }
    let mut stderr = truncate_bytes(stderr, cap);
    let clean_exit = status.is_some_and(|s| s.success());
    let compile_ok = announced.is_some() || !tests.is_empty() || summary.is_some() || timed_out || clean_exit;
    if !compile_ok {
        if stderr.trim().is_empty() {
            stderr = format!("program terminated during loading ({})", describe_exit(status));
        }
        return ExecutionOutcome { compile_ok, tests: Vec::new(), stdout, stderr, timed_out, wall_time_ms };
    }
    if !timed_out {
        let passed = tests.iter().filter(|t| t.passed).count();
        let consistent = summary == Some((passed, tests.len())) && announced.is_none_or(|n| n == tests.len());
        if !consistent {
            tests.push(TestResult {
                name: "harness".into(),
                passed: false,
                message: format!("test run ended before every test reported ({})", describe_exit(status)),
            });
        }
    }
    ExecutionOutcome { compile_ok, tests, stdout, stderr, timed_out, wall_time_ms }
}

/// Locates an interpreter on PATH; used by callers that want to fail fast.
pub fn find_interpreter(name: &str) -> Option<PathBuf> {
    if name.contains('/') {
        let p = PathBuf::from(name);
        return p.is_file().then_some(p);
    }
    std::env::var_os("PATH")?.to_str()?.split(':').map(|dir| PathBuf::from(dir).join(name)).find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> Sandbox {
        Sandbox::new(SandboxConfig::default())
    }

    fn quick() -> SandboxLimits {
        SandboxLimits { wall_timeout_ms: 2_000, ..SandboxLimits::default() }
    }

    #[test]
    fn forced_arithmetic_passes() {
        let out = sandbox()
            .run_solution_against_tests(
                "def add(a,b): return a+b",
                "def test_add():\n    assert add(2, 3) == 5\n",
                &quick(),
            )
            .unwrap();
        assert!(out.compile_ok);
        assert_eq!(out.tests.len(), 1);
        assert!(out.tests[0].passed);
        assert!(out.all_passed());
    }

    #[test]
    fn unterminated_string_is_a_compile_failure() {
        let out =
            sandbox().run_solution_against_tests("x = 'oops\n", "def test_x():\n    assert x\n", &quick()).unwrap();
        assert!(!out.compile_ok);
        assert!(out.tests.is_empty());
        assert!(out.stderr.contains("SyntaxError"), "{}", out.stderr);
    }

    #[test]
    fn broken_tests_file_is_a_compile_failure() {
        let out = sandbox().run_solution_against_tests("x = 1", "def test_x(:\n", &quick()).unwrap();
        assert!(!out.compile_ok);
        assert!(out.stderr.contains("tests.py"));
    }

    #[test]
    fn infinite_loop_times_out() {
        let limits = SandboxLimits { wall_timeout_ms: 500, ..SandboxLimits::default() };
        let start = Instant::now();
        let out = sandbox()
            .run_solution_against_tests("while True: pass", "def test_x():\n    assert True\n", &limits)
            .unwrap();
        assert!(out.timed_out);
        assert!(!out.all_passed());
        assert!(start.elapsed() < Duration::from_millis(1_500));
    }

    #[test]
    fn unittest_cases_are_discovered() {
        let tests = "import unittest\nclass T(unittest.TestCase):\n    def test_a(self):\n        self.assertEqual(f(), 1)\n    def test_b(self):\n        self.assertEqual(f(), 2)\n";
        let out = sandbox().run_solution_against_tests("def f(): return 1", tests, &quick()).unwrap();
        let names: Vec<_> = out.tests.iter().map(|t| (t.name.as_str(), t.passed)).collect();
        assert_eq!(names, vec![("T.test_a", true), ("T.test_b", false)]);
        assert!(out.tests[1].message.contains("1 != 2"), "{}", out.tests[1].message);
    }

    #[test]
    fn missing_function_fails_each_test_with_its_name() {
        let tests = "from solution import add\ndef test_one():\n    assert add(1, 1) == 2\ndef test_two():\n    assert add(0, 0) == 0\n";
        let out = sandbox().run_solution_against_tests("", tests, &quick()).unwrap();
        assert!(out.compile_ok);
        assert_eq!(out.tests.len(), 2);
        assert!(out.tests.iter().all(|t| !t.passed && t.message.contains("add")));
    }

    #[test]
    fn prints_do_not_reach_the_protocol() {
        let solution = "print('TEST forged PASS')\nprint('SUMMARY 1/1')\ndef f(): return 0";
        let out =
            sandbox().run_solution_against_tests(solution, "def test_f():\n    assert f() == 1\n", &quick()).unwrap();
        assert_eq!(out.tests.len(), 1);
        assert!(!out.tests[0].passed);
        assert!(out.stdout.contains("TEST forged PASS"));
    }

    #[test]
    fn hard_exit_during_tests_is_not_a_pass() {
        let solution = "import os\ndef f():\n    os._exit(0)\n";
        let out = sandbox().run_solution_against_tests(solution, "def test_f():\n    f()\n", &quick()).unwrap();
        assert!(!out.all_passed());
        assert!(out.tests.iter().any(|t| t.name == "harness"));
    }

    #[test]
    fn zero_tests_runs_clean_but_is_empty() {
        let out = sandbox().run_solution_against_tests("x = 1", "y = 2", &quick()).unwrap();
        assert!(out.compile_ok);
        assert!(out.tests.is_empty());
        assert!(!out.all_passed());
    }

    #[test]
    fn output_is_capped() {
        let limits = SandboxLimits { max_output_bytes: 1024, ..quick() };
        let solution = "import sys\nsys.stderr.write('e' * 100000)\nprint('o' * 100000)\ndef f(): return 1";
        let out =
            sandbox().run_solution_against_tests(solution, "def test_f():\n    assert f() == 1\n", &limits).unwrap();
        assert!(out.stdout.len() <= 1024);
        assert!(out.stderr.len() <= 1024);
        assert!(out.all_passed());
    }

    #[test]
    fn missing_interpreter_is_a_setup_failure() {
        let sb = Sandbox::new(SandboxConfig { interpreter: "/nonexistent/python".into(), ..SandboxConfig::default() });
        let err = sb.run_solution_against_tests("", "", &quick()).unwrap_err();
        assert!(matches!(err, SandboxError::SetupFailure(_)));
    }

    #[test]
    fn submission_requires_functional_task() {
        let mut task = crate::domain::tests_support::task_with_tests("def test_a():\n    assert True\n");
        task.status = TaskStatus::NonFunctional;
        let err = sandbox().run_submission(&task, "", &quick()).unwrap_err();
        assert!(matches!(err, SandboxError::TaskNotFunctional(_)));
    }

    #[test]
    fn protocol_parsing() {
        assert!(matches!(parse_line("TEST a PASS"), Some(ProtocolLine::Test(t)) if t.passed));
        match parse_line("TEST a FAIL boom here") {
            Some(ProtocolLine::Test(t)) => assert_eq!((t.passed, t.message.as_str()), (false, "boom here")),
            _ => panic!(),
        }
        assert!(parse_line("TEST a FAILED").is_none());
        assert!(parse_line("TEST  PASS").is_none());
        assert!(matches!(parse_line("SUMMARY 2/3"), Some(ProtocolLine::Summary { passed: 2, total: 3 })));
        assert!(matches!(parse_line("READY 4"), Some(ProtocolLine::Ready(4))));
        assert!(parse_line("READY x").is_none());
        assert!(parse_line("hello").is_none());
    }

    #[test]
    fn limits_validation() {
        assert!(SandboxLimits { wall_timeout_ms: 0, ..SandboxLimits::default() }.validate().is_err());
        assert!(SandboxLimits { network_allowed: true, ..SandboxLimits::default() }.validate().is_err());
    }
}

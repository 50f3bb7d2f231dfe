use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use tdk_core::handmodel::builtin_proto0;
use tdk_core::runtime::{
    run_control_loop, serve_bridge, BridgeDriver, ControlLoopConfig, DriverError, LoopbackDriver, MotorDriver,
    Policy,
};

fn start(driver: LoopbackDriver) -> (String, Arc<AtomicBool>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let handle = thread::spawn(move || serve_bridge(listener, Arc::new(Mutex::new(driver)), 16, flag).unwrap());
    (addr, stop, handle)
}

#[test]
fn raw_protocol_over_tcp() {
    let (addr, stop, handle) = start(LoopbackDriver::new(vec![0.5; 16], 1.0, 0.05));
    let stream = TcpStream::connect(&addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut ask = |line: &str| {
        w.write_all(format!("{line}\n").as_bytes()).unwrap();
        let mut reply = String::new();
        r.read_line(&mut reply).unwrap();
        reply.trim_end().to_string()
    };
    let state = ask("READ");
    let fields: Vec<&str> = state.split(' ').collect();
    assert_eq!(fields[0], "STATE");
    assert_eq!(fields.len(), 1 + 1 + 32);
    assert_eq!(fields[2], "0.5");
    assert_eq!(ask(&format!("WRITE {}", vec!["1"; 16].join(" "))), "OK");
    assert_eq!(ask("WRITE 1 2 3"), "ERR parse");
    assert_eq!(ask("HELLO"), "ERR parse");
    assert!(ask("READ").starts_with("STATE 0.05 1 1"));
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap();
}

#[test]
fn control_loop_through_bridge() {
    let m = builtin_proto0();
    let (addr, stop, handle) = start(LoopbackDriver::at_pose(&m, &[0.0; 11], 0.5, 0.05).unwrap());
    let mut client = BridgeDriver::connect(&addr, 16, Duration::from_secs(5)).unwrap();
    let cfg = ControlLoopConfig {
        realtime: false,
        ..ControlLoopConfig::default()
    };
    let halt = AtomicBool::new(false);
    let log = run_control_loop(&cfg, &m, &Policy::zero(&m), &mut client, Some(20), &halt, |_| {}).unwrap();
    assert_eq!(log.records.len(), 20);
    assert!(log.fault.is_none());
    for r in &log.records {
        assert!(r.qhat.iter().all(|q| q.abs() < 1e-3));
    }
    assert!(matches!(
        client.write_motor_targets(&[0.0; 3]),
        Err(DriverError::Dimension { expected: 16, actual: 3 })
    ));
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap();
}

#[test]
fn silent_motors_report_timeout() {
    let mut d = LoopbackDriver::new(vec![0.0; 16], 1.0, 0.05);
    d.silent_after = Some(1);
    let (addr, stop, handle) = start(d);
    let mut client = BridgeDriver::connect(&addr, 16, Duration::from_secs(5)).unwrap();
    assert!(client.read_motor_state().is_ok());
    assert!(matches!(client.read_motor_state(), Err(DriverError::Timeout)));
    assert_eq!(client.request("READ").unwrap(), "ERR timeout");
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap();
}

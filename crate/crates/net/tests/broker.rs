use std::time::Duration;

use sting_core::control::{topic, Body, Bus, Command, Envelope, CONTROL_SCHEMA_VERSION};
use sting_net::broker::{Broker, BrokerClient, ClientError};

const WAIT: Duration = Duration::from_secs(2);

fn abort(topic: &str, msg_id: &str) -> Envelope {
    Envelope::new(topic, msg_id, 1, Body::Command(Command::Abort { run_id: "r".into() }))
}

#[test]
fn foreign_schema_version_is_rejected_at_handshake() {
    let broker = Broker::start("127.0.0.1:0", Bus::new()).unwrap();
    match BrokerClient::connect_with_version(broker.local_addr(), "old-agent", CONTROL_SCHEMA_VERSION + 1) {
        Err(ClientError::Rejected(reason)) => assert!(reason.contains("schema version"), "{reason}"),
        other => panic!("expected rejection, got {other:?}"),
    }
    assert!(BrokerClient::connect(&format!("tcp://{}", broker.local_addr()), "agent").is_ok());
}

#[test]
fn remote_clients_and_the_local_bus_share_topics() {
    let bus = Bus::new();
    let broker = Broker::start("127.0.0.1:0", bus.clone()).unwrap();
    let agent = BrokerClient::connect(broker.local_addr(), "a1").unwrap();
    agent.subscribe(&topic::agent_command("a1")).unwrap();
    let observer = BrokerClient::connect(broker.local_addr(), "ui").unwrap();
    observer.subscribe(topic::ALL_AGENT_STATUS).unwrap();
    let (_, local) = bus.subscribe(topic::ALL_AGENT_STATUS);
    // Subscriptions are processed in order with publishes on the same
    // connection, but across connections we wait for them to land.
    std::thread::sleep(Duration::from_millis(100));

    // Local publish reaches the remote subscriber.
    let cmd = abort(&topic::agent_command("a1"), "c1");
    assert_eq!(bus.publish(&cmd), 1);
    assert_eq!(agent.recv_timeout(WAIT).unwrap(), Some(cmd));

    // Remote publish reaches local and remote wildcard subscribers, but not
    // agents that only listen to their own commands.
    let status = abort(&topic::agent_status("a1"), "s1");
    agent.publish(&status).unwrap();
    assert_eq!(local.recv_timeout(WAIT).unwrap(), status);
    assert_eq!(observer.recv_timeout(WAIT).unwrap(), Some(status));
    assert_eq!(agent.recv_timeout(Duration::from_millis(200)).unwrap(), None);
}

#[test]
fn envelopes_with_foreign_schema_version_are_dropped() {
    let bus = Bus::new();
    let broker = Broker::start("127.0.0.1:0", bus.clone()).unwrap();
    let (_, local) = bus.subscribe("#");
    let c = BrokerClient::connect(broker.local_addr(), "a1").unwrap();
    let mut bad = abort(&topic::agent_status("a1"), "bad");
    bad.schema_version = 99;
    c.publish(&bad).unwrap();
    let good = abort(&topic::agent_status("a1"), "good");
    c.publish(&good).unwrap();
    assert_eq!(local.recv_timeout(WAIT).unwrap().msg_id, "good");
}

#[test]
fn disconnect_removes_subscriptions() {
    let bus = Bus::new();
    let broker = Broker::start("127.0.0.1:0", bus.clone()).unwrap();
    let c = BrokerClient::connect(broker.local_addr(), "a1").unwrap();
    c.subscribe("sting/#").unwrap();
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(bus.publish(&abort("sting/x", "1")), 1);
    drop(c);
    let deadline = std::time::Instant::now() + WAIT;
    while bus.publish(&abort("sting/x", "2")) != 0 {
        assert!(std::time::Instant::now() < deadline, "subscription outlived its connection");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn unsubscribe_stops_delivery() {
    let bus = Bus::new();
    let broker = Broker::start("127.0.0.1:0", bus.clone()).unwrap();
    let c = BrokerClient::connect(broker.local_addr(), "a1").unwrap();
    c.subscribe("sting/+/x").unwrap();
    std::thread::sleep(Duration::from_millis(100));
    bus.publish(&abort("sting/a/x", "1"));
    assert_eq!(c.recv_timeout(WAIT).unwrap().map(|e| e.msg_id), Some("1".into()));
    c.unsubscribe("sting/+/x").unwrap();
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(bus.publish(&abort("sting/a/x", "2")), 0);
}

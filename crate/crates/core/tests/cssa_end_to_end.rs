mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;

use common::{h, plant, sw, tcp};
use cssasim_core::controller::OperatorCommand;
use cssasim_core::cssa::{load_policies, AlertState, AuditDirection, CssaApp, CssaConfig, PolicySet};
use cssasim_core::flow::Action;
use cssasim_core::net::{Envelope, SimTime};
use cssasim_core::secfn::{AlertReason, DropReason, RateLimitSpec, Scope};
use cssasim_core::sim::log::LogKind;
use cssasim_core::sim::{Command, SimConfig, Simulation};

fn cssa(policies: PolicySet) -> Simulation {
    let topo = plant();
    let app = CssaApp::new(topo.clone(), policies, CssaConfig::default());
    let mut sim = Simulation::new(topo, 11, Box::new(app), SimConfig::default());
    sim.run_until(SimTime::from_millis(5));
    sim
}

fn policies(body: &str) -> PolicySet {
    load_policies(&format!("<policies>{body}</policies>")).unwrap()
}

fn rules_at_priority(sim: &Simulation, switch: &str, priority: u32) -> usize {
    sim.switch(&sw(switch)).unwrap().table.rules().iter().filter(|r| r.priority == priority).count()
}

fn policy_rule_count(sim: &Simulation) -> usize {
    sim.switches().map(|s| s.table.rules().iter().filter(|r| r.priority > 1).count()).sum()
}

fn alerts_of(sim: &Simulation, reason: AlertReason) -> usize {
    sim.controller_state().alerts.iter().filter(|a| a.reason == reason).count()
}

#[test]
fn edge_switches_get_guards_and_bindings() {
    let sim = cssa(PolicySet::default());
    let topo = sim.topology().clone();
    for (id, s) in [("SW1", 6usize), ("SW4", 2)] {
        let st = sim.switch(&sw(id)).unwrap();
        assert_eq!(rules_at_priority(&sim, id, 1), s, "{id}");
        let tv = st.secfn.tv_config().expect("tv configured");
        for host in topo.hosts.values().filter(|x| x.switch.as_str() == id) {
            assert_eq!(tv.binding(host.port).unwrap().ip, host.ip);
        }
    }
    assert!(sim.switch(&sw("SW2")).unwrap().table.is_empty());
}

#[test]
fn default_deny_installs_one_drop_at_ingress() {
    let mut sim = cssa(PolicySet::default());
    let topo = sim.topology().clone();
    for i in 0..3 {
        sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 40_000 + i, 502, b"x")).unwrap();
    }
    let r = sim.run_to_quiescence(SimTime::from_secs(1));
    assert_eq!(r.delivered, 0);
    assert_eq!(r.dropped[&DropReason::RuleDrop], 3);
    assert!(r.balanced());
    let drops: Vec<_> = sim
        .switches()
        .flat_map(|s| s.table.rules().iter().map(move |r| (s.id.clone(), r)))
        .filter(|(_, r)| r.actions == [Action::Drop])
        .collect();
    assert_eq!(drops.len(), 1);
    assert_eq!(drops[0].0, sw("SW1"));
    assert_eq!(drops[0].1.matcher.in_port, Some(topo.host(&h("MTU")).unwrap().port));
}

#[test]
fn permit_installs_path_and_delivers() {
    let mut sim = cssa(policies(
        r#"<policy id="1" priority="10"><src host="MTU"/><dst host="PLC1"/><traffic proto="tcp" dport="502"/><permit/></policy>"#,
    ));
    let topo = sim.topology().clone();
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 1234, 502, b"read coil")).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(1));
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 1234, 502, b"write coil")).unwrap();
    let r = sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(r.delivered, 2);
    let got: Vec<&[u8]> = sim.deliveries(&h("PLC1")).iter().map(|d| d.packet.payload.as_slice()).collect();
    assert_eq!(got, [b"read coil".as_slice(), b"write coil"]);
    for id in ["SW1", "SW2", "SW4"] {
        assert_eq!(rules_at_priority(&sim, id, 100), 1, "{id}");
    }
    assert_eq!(rules_at_priority(&sim, "SW3", 100), 0);
    // unrelated service still denied
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 1234, 22, b"ssh")).unwrap();
    let r = sim.run_to_quiescence(SimTime::from_secs(3));
    assert_eq!(r.delivered, 2);
}

#[test]
fn repeated_packet_in_is_idempotent() {
    let mut sim = cssa(policies(r#"<policy id="1" priority="10"><src host="HMI"/><permit/></policy>"#));
    let topo = sim.topology().clone();
    // HMI sits behind a switch without TV, so every miss punts; the rules must not duplicate
    for i in 0..5 {
        sim.inject_packet(&h("HMI"), tcp(&topo, "HMI", "WEB", 5000, 80, &[i])).unwrap();
    }
    let r = sim.run_to_quiescence(SimTime::from_secs(1));
    assert_eq!(r.delivered, 5);
    let before = policy_rule_count(&sim);
    for i in 0..5 {
        sim.inject_packet(&h("HMI"), tcp(&topo, "HMI", "WEB", 5000, 80, &[i])).unwrap();
    }
    sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(policy_rule_count(&sim), before);
    assert_eq!(sim.log().of_kind(LogKind::RuleReject).count(), 0);
}

#[test]
fn encrypted_flow_hides_payload_mid_path() {
    let mut sim = cssa(policies(
        r#"<policy id="1" priority="10"><src host="MTU"/><dst host="PLC1"/><encrypt/></policy>"#,
    ));
    let topo = sim.topology().clone();
    let tap = sim.tap_link(&sw("SW2"), &sw("SW4")).unwrap();
    let marker = b"MARKER-0123456789abcdef-MARKER!!";
    for i in 0..20u8 {
        let mut payload = vec![i; 100];
        payload.extend_from_slice(marker);
        sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 777, 502, &payload)).unwrap();
    }
    let r = sim.run_to_quiescence(SimTime::from_secs(1));
    assert_eq!(r.delivered, 20);
    for (i, d) in sim.deliveries(&h("PLC1")).iter().enumerate() {
        assert_eq!(d.packet.envelope, Envelope::Plain);
        assert_eq!(&d.packet.payload[..100], &[i as u8; 100][..]);
    }
    let recs = sim.read_tap(tap);
    assert_eq!(recs.len(), 20);
    for rec in recs {
        assert!(rec.packet.envelope.is_encrypted());
        assert!(!rec.packet.payload.windows(marker.len()).any(|w| w == marker));
    }
    let keys: Vec<(String, u64)> = sim
        .log()
        .of_kind(LogKind::KeyInstall)
        .map(|k| (k.subject.clone(), k.get_u64("key_id").unwrap()))
        .collect();
    assert_eq!(keys.len(), 2);
    assert_eq!(keys[0].1, keys[1].1);
    let at: BTreeSet<&str> = keys.iter().map(|k| k.0.as_str()).collect();
    assert_eq!(at, BTreeSet::from(["SW1", "SW4"]));
}

#[test]
fn unsatisfiable_latency_raises_enforcement_failure() {
    let mut sim = cssa(policies(
        r#"<policy id="1" priority="10"><src host="MTU"/><dst host="PLC1"/><permit max_latency_us="150"/></policy>"#,
    ));
    let topo = sim.topology().clone();
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 1, 502, b"x")).unwrap();
    let r = sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(r.delivered, 0);
    assert_eq!(policy_rule_count(&sim), 0);
    assert_eq!(alerts_of(&sim, AlertReason::EnforcementFailure), 1);
    assert!(r.balanced());

    let mut sim = cssa(policies(
        r#"<policy id="1" priority="10"><src host="MTU"/><dst host="PLC1"/><permit max_latency_us="200"/></policy>"#,
    ));
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "PLC1", 1, 502, b"x")).unwrap();
    assert_eq!(sim.run_to_quiescence(SimTime::from_secs(2)).delivered, 1);
}

#[test]
fn spoofed_source_dropped_and_alerted_once_per_window() {
    let mut sim = cssa(PolicySet::default());
    let topo = sim.topology().clone();
    let forged = || {
        let mut p = tcp(&topo, "ATK1", "WEB", 6666, 80, b"spoof");
        p.src_ip = topo.host(&h("MTU")).unwrap().ip;
        p
    };
    for i in 0..10u64 {
        sim.inject_at(SimTime::from_millis(10 + i * 100), &h("ATK1"), forged()).unwrap();
    }
    let r = sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(r.dropped[&DropReason::SpoofedSource], 10);
    assert!(sim
        .log()
        .of_kind(LogKind::Drop)
        .filter(|d| d.get_str("reason") == Some("spoofed_source"))
        .all(|d| d.subject == "SW1"));
    let st = sim.controller_state();
    let spoof: Vec<_> = st.alerts.iter().filter(|a| a.reason == AlertReason::SpoofedSource).collect();
    assert_eq!(spoof.len(), 1);
    assert_eq!(spoof[0].host_id, Some(h("ATK1")));
    assert_eq!(spoof[0].count, 10);

    let window = sim_dedup();
    sim.inject_at(SimTime(10_000 + window + 1), &h("ATK1"), forged()).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(30));
    assert_eq!(alerts_of(&sim, AlertReason::SpoofedSource), 2);
}

fn sim_dedup() -> u64 {
    CssaConfig::default().dedup_us
}

#[test]
fn isolation_is_complete_and_idempotent() {
    let mut sim = cssa(policies(r#"<policy id="1" priority="10"><dst host="WEB"/><permit/></policy>"#));
    let topo = sim.topology().clone();
    sim.inject_packet(&h("ATK1"), tcp(&topo, "ATK1", "WEB", 1, 80, b"before")).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(1));
    assert_eq!(sim.deliveries(&h("WEB")).len(), 1);

    let q = sim.commands();
    q.push(Command::Operator { command: OperatorCommand::Isolate { host: h("ATK1") } });
    q.push(Command::Operator { command: OperatorCommand::Isolate { host: h("ATK1") } });
    sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(rules_at_priority(&sim, "SW1", u32::MAX), 1);
    let st = sim.controller_state();
    assert_eq!(st.isolated, [h("ATK1")]);
    let ops = st.audit.iter().filter(|a| a.direction == AuditDirection::Operator).count();
    assert_eq!(ops, 2);

    for (i, dst) in ["WEB", "PLC1", "MTU", "HMI"].iter().enumerate() {
        sim.inject_packet(&h("ATK1"), tcp(&topo, "ATK1", dst, 2 + i as u16, 80, b"after")).unwrap();
    }
    sim.run_to_quiescence(SimTime::from_secs(3));
    for host in ["WEB", "PLC1", "MTU", "HMI"] {
        assert!(sim.deliveries(&h(host)).iter().all(|d| d.packet.payload != b"after"), "{host}");
    }
    // traffic toward the isolated host is cut as well
    sim.inject_packet(&h("HMI"), tcp(&topo, "HMI", "ATK1", 9, 80, b"to atk")).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(4));
    assert!(sim.deliveries(&h("ATK1")).is_empty());
}

#[test]
fn isolate_moves_host_alerts_to_action_taken() {
    let mut sim = cssa(PolicySet::default());
    let topo = sim.topology().clone();
    let mut p = tcp(&topo, "ATK2", "WEB", 1, 80, b"");
    p.src_mac = "02:00:00:00:aa:aa".parse().unwrap();
    sim.inject_packet(&h("ATK2"), p).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(1));
    let id = sim.controller_state().alerts[0].alert_id;
    sim.apply_command(Command::Operator { command: OperatorCommand::Acknowledge { alert_id: id } });
    sim.apply_command(Command::Operator { command: OperatorCommand::Isolate { host: h("ATK2") } });
    sim.run_to_quiescence(SimTime::from_secs(2));
    let a = &sim.controller_state().alerts[0];
    assert!(matches!(&a.state, AlertState::ActionTaken { action } if action == "isolate"));
    let names: Vec<&str> = a.history.iter().map(|(_, s)| s.name()).collect();
    assert_eq!(names, ["open", "acknowledged", "action_taken"]);
}

#[test]
fn restrict_requires_tv_and_validates() {
    let mut sim = cssa(PolicySet::default());
    let spec = RateLimitSpec { scope: Scope::PerDevice, threshold: 5, target: Default::default(), window_ms: 1000 };
    sim.apply_command(Command::Operator { command: OperatorCommand::Restrict { host: h("ATK3"), spec: spec.clone() } });
    sim.apply_command(Command::Operator { command: OperatorCommand::Restrict { host: h("HMI"), spec: spec.clone() } });
    let zero = RateLimitSpec { threshold: 0, ..spec };
    sim.apply_command(Command::Operator { command: OperatorCommand::Restrict { host: h("ATK3"), spec: zero } });
    let errs = sim.take_command_errors();
    assert_eq!(errs.len(), 2);
    assert_eq!(sim.controller_state().restricted, [h("ATK3")]);
    let limits = sim.switch(&sw("SW1")).unwrap().secfn.tv_config().unwrap().limits().len();
    sim.run_to_quiescence(SimTime::from_secs(1));
    let after = sim.switch(&sw("SW1")).unwrap().secfn.tv_config().unwrap().limits().len();
    assert_eq!(after, limits + 1);
}

#[test]
fn concurrent_commands_audit_gapless() {
    let mut sim = cssa(PolicySet::default());
    let q = sim.commands();
    let threads: Vec<_> = (0..4)
        .map(|t| {
            let q = q.clone();
            thread::spawn(move || {
                for i in 0..25 {
                    let cmd = if i % 2 == 0 {
                        OperatorCommand::FireEvent { name: format!("ev{t}-{i}") }
                    } else {
                        OperatorCommand::Acknowledge { alert_id: 999 }
                    };
                    q.push(Command::Operator { command: cmd });
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    sim.run_to_quiescence(SimTime::from_secs(1));
    let audit = sim.controller_state().audit;
    for (i, rec) in audit.iter().enumerate() {
        assert_eq!(rec.seq, i as u64 + 1);
    }
    let ops: Vec<_> = audit.iter().filter(|a| a.direction == AuditDirection::Operator).collect();
    assert_eq!(ops.len(), 100);
    assert_eq!(ops.iter().filter(|a| a.summary.contains("rejected")).count(), 4 * 12);
}

#[test]
fn policy_load_and_delete_through_commands() {
    let mut sim = cssa(PolicySet::default());
    let topo = Arc::clone(sim.topology());
    let xml = r#"<policies><policy id="5" priority="10"><src host="MTU"/><permit/></policy></policies>"#;
    sim.apply_command(Command::Operator { command: OperatorCommand::LoadPolicies { xml: xml.into() } });
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "WEB", 1, 80, b"a")).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(1));
    assert_eq!(sim.deliveries(&h("WEB")).len(), 1);
    sim.apply_command(Command::Operator { command: OperatorCommand::DeletePolicy { policy_id: 5 } });
    sim.run_to_quiescence(SimTime::from_secs(2));
    assert_eq!(policy_rule_count(&sim), 0);
    sim.inject_packet(&h("MTU"), tcp(&topo, "MTU", "WEB", 1, 80, b"b")).unwrap();
    sim.run_to_quiescence(SimTime::from_secs(3));
    assert_eq!(sim.deliveries(&h("WEB")).len(), 1);
    sim.apply_command(Command::Operator { command: OperatorCommand::DeletePolicy { policy_id: 5 } });
    assert_eq!(sim.take_command_errors().len(), 1);
}

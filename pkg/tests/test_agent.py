from __future__ import annotations

import pytest

from privflow import features as feat
from privflow.agent import AgentConfig, DomainAgent
from privflow.computing import ComputingServer
from privflow.detection import DetectionServer
from privflow.flows import FlowWindow, Label, synth_syn_flood, window_flows
from privflow.harness import build_training_set
from privflow.masking import remove_mask
from privflow.services import CsService, DsService
from privflow.transport import ChannelClosed, InMemoryNetwork, MaskMsg, TupleMsg

CODEC = feat.FixedPointCodec(1000)


def make_cluster(train, k=5, node_budget=None):
    """In-memory network with CS and DS services wired together."""
    net = InMemoryNetwork()
    cs_core = ComputingServer(k=k, node_budget=node_budget)
    cs_core.load_training(train)
    ds_core = DetectionServer(k=k, node_budget=node_budget)

    cs_to_ds, ds_from_cs = net.pair("cs->ds", "ds<-cs")
    cs = CsService(cs_core, cs_to_ds)
    ds = DsService(ds_core)
    net.register(ds_from_cs, lambda m: ds.handle(m, ds_from_cs))
    cs.announce_topology()
    net.pump()
    return net, cs, ds, cs_core, ds_core


def connect_agent(net, cs, ds):
    agent_cs, cs_agent = net.pair("agent->cs", "cs<-agent")
    agent_ds, ds_agent = net.pair("agent->ds", "ds<-agent")
    net.register(cs_agent, lambda m: cs.handle(m, cs_agent))
    net.register(ds_agent, lambda m: ds.handle(m, ds_agent))
    return agent_cs, agent_ds


def training_windows(seed=5, normal=4000, attack=4000, duration=240_000):
    stream = synth_syn_flood(seed, normal, attack, 5, duration)
    return window_flows(stream, 1, 3000)


class TestPretreat:
    def test_empty_window_still_masked(self):
        agent = DomainAgent(AgentConfig(domain_id=2, seed=3))
        masked, mask = agent.pretreat(FlowWindow(2, 0, 3000, ()))
        assert masked.serial_number == 2
        # plaintext features are all zero, so masked values equal the masks
        assert masked.masked_features == mask.masks

    def test_seeded_reproducibility(self):
        w = FlowWindow(1, 0, 3000, ())
        a = DomainAgent(AgentConfig(domain_id=1, seed=11)).pretreat(w)
        b = DomainAgent(AgentConfig(domain_id=1, seed=11)).pretreat(w)
        assert a == b

    def test_unmask_roundtrip(self):
        windows = training_windows()
        agent = DomainAgent(AgentConfig(domain_id=1, seed=4))
        for w in windows[:20]:
            masked, mask = agent.pretreat(w)
            assert remove_mask(masked, mask) == feat.extract_features(w, CODEC)

    def test_wrong_domain_rejected(self):
        agent = DomainAgent(AgentConfig(domain_id=1))
        with pytest.raises(ValueError):
            agent.pretreat(FlowWindow(2, 0, 3000, ()))

    def test_privacy_off_uses_zero_masks(self):
        agent = DomainAgent(AgentConfig(domain_id=1, privacy=False))
        masked, mask = agent.pretreat(FlowWindow(1, 0, 3000, ()))
        assert mask.masks == (0, 0, 0, 0, 0)
        assert masked.masked_features == (0, 0, 0, 0, 0)


class TestRunAgent:
    def setup_cluster(self):
        windows = training_windows()
        train = build_training_set(windows[::2], CODEC)
        return make_cluster(train), windows[1::2][:10]

    def test_counting_contract(self):
        (net, cs, ds, _, ds_core), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9))
        result = agent.run_windows(test_windows, agent_cs, agent_ds)

        tuples = [m for m in agent_cs.sent_log if isinstance(m, TupleMsg)]
        masks = [m for m in agent_ds.sent_log if isinstance(m, MaskMsg)]
        assert len(tuples) == 10
        assert len(masks) == 10
        tuple_keys = [(m.tuple.serial_number, m.tuple.time) for m in tuples]
        mask_keys = [(m.mask.serial_number, m.mask.time) for m in masks]
        assert tuple_keys == mask_keys  # the two channels stay in bijection
        assert result.sent_keys == tuple_keys
        assert len(ds_core.verdicts) == 10

    def test_alarms_surfaced_with_keys(self):
        (net, cs, ds, _, ds_core), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9))
        result = agent.run_windows(test_windows, agent_cs, agent_ds)

        expected = {
            (v.serial_number, v.time)
            for v in ds_core.verdicts
            if v.label is Label.ATTACK
        }
        got = {(a.serial_number, a.time) for a in result.alarms}
        assert got == expected

    def test_no_plaintext_on_either_channel(self):
        (net, cs, ds, _, _), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9))
        agent.run_windows(test_windows, agent_cs, agent_ds)

        plaintexts = {
            feat.extract_features(w, CODEC).feature_words() for w in test_windows
        }
        for msg in agent_cs.sent_log:
            assert isinstance(msg, TupleMsg)
            assert msg.tuple.masked_features not in plaintexts
        for msg in agent_ds.sent_log:
            assert isinstance(msg, MaskMsg)
            assert msg.mask.masks not in plaintexts

    def test_channel_closed_mid_run(self):
        (net, cs, ds, _, _), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent_cs.peer.close()  # computing server side goes away
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9))
        with pytest.raises(ChannelClosed):
            agent.run_windows(test_windows, agent_cs, agent_ds)

    def test_channel_closed_surfaces_partial_results(self):
        (net, cs, ds, _, ds_core), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9, max_inflight=1))

        sent = 0
        original_send = agent_cs.send

        def flaky_send(msg):
            nonlocal sent
            if sent == 6:
                raise ChannelClosed("computing server went away")
            sent += 1
            original_send(msg)

        agent_cs.send = flaky_send
        with pytest.raises(ChannelClosed) as err:
            agent.run_windows(test_windows, agent_cs, agent_ds)
        partial = err.value.partial
        assert len(partial.sent_keys) == 6
        # every alarm for a completed window was still surfaced
        completed = {
            (v.serial_number, v.time)
            for v in ds_core.verdicts
            if v.label is Label.ATTACK
        }
        assert {(a.serial_number, a.time) for a in partial.alarms} <= completed

    def test_backpressure_throttles_inflight(self):
        (net, cs, ds, _, ds_core), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        agent = DomainAgent(AgentConfig(domain_id=1, seed=9, max_inflight=2))
        result = agent.run_windows(test_windows, agent_cs, agent_ds)
        assert len(result.sent_keys) == len(test_windows)
        assert len(ds_core.verdicts) == len(test_windows)

    def test_verdicts_match_direct_pipeline(self):
        from privflow.harness import run_pipeline_direct

        (net, cs, ds, cs_core, ds_core), test_windows = self.setup_cluster()
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        DomainAgent(AgentConfig(domain_id=1, seed=9)).run_windows(
            test_windows, agent_cs, agent_ds
        )
        channel_verdicts = {
            (v.serial_number, v.time): v.label for v in ds_core.verdicts
        }

        ds2 = DetectionServer(k=5, node_budget=None)
        ds2.set_topology_blob(cs_core.topology_blob())
        direct = run_pipeline_direct(
            test_windows, DomainAgent(AgentConfig(domain_id=1, seed=9)), cs_core, ds2
        )
        assert channel_verdicts == {
            (v.serial_number, v.time): v.label for v in direct
        }


class TestMultiDomainRouting:
    def test_alarms_routed_by_serial(self):
        windows = training_windows()
        train = build_training_set(windows[::2], CODEC)
        net, cs, ds, _, ds_core = make_cluster(train)

        results = {}
        for domain_id in (1, 2, 3):
            agent_cs, agent_ds = connect_agent(net, cs, ds)
            stream = [
                FlowWindow(domain_id, w.window_start, w.window_length, w.flows)
                for w in windows[1::2][: 6 + domain_id]
            ]
            agent = DomainAgent(AgentConfig(domain_id=domain_id, seed=domain_id))
            results[domain_id] = agent.run_windows(stream, agent_cs, agent_ds)

        for domain_id, result in results.items():
            assert all(a.serial_number == domain_id for a in result.alarms)
            expected = {
                (v.serial_number, v.time)
                for v in ds_core.verdicts
                if v.label is Label.ATTACK and v.serial_number == domain_id
            }
            assert {(a.serial_number, a.time) for a in result.alarms} == expected


class TestSocketModeParity:
    def test_socket_run_matches_memory_run(self):
        from privflow.services import SocketServer
        from privflow.transport import open_channel

        windows = training_windows()
        train = build_training_set(windows[::2], CODEC)
        test_windows = windows[1::2][:8]

        # in-memory reference
        net, cs, ds, cs_core, ds_core = make_cluster(train)
        agent_cs, agent_ds = connect_agent(net, cs, ds)
        DomainAgent(AgentConfig(domain_id=1, seed=2)).run_windows(
            test_windows, agent_cs, agent_ds
        )
        reference = {(v.serial_number, v.time): v.label for v in ds_core.verdicts}

        # socket cluster
        cs_core2 = ComputingServer(k=5, node_budget=None)
        cs_core2.load_training(train)
        ds_core2 = DetectionServer(k=5, node_budget=None)
        ds_service = DsService(ds_core2)
        ds_server = SocketServer(ds_service.handle)
        ds_server.start()
        cs_to_ds = open_channel(ds_server.endpoint, "PLAIN", allow_insecure=True)
        cs_service = CsService(cs_core2, cs_to_ds)
        cs_service.announce_topology()
        cs_server = SocketServer(cs_service.handle)
        cs_server.start()
        try:
            a_cs = open_channel(cs_server.endpoint, "PLAIN", allow_insecure=True)
            a_ds = open_channel(ds_server.endpoint, "PLAIN", allow_insecure=True)
            result = DomainAgent(AgentConfig(domain_id=1, seed=2)).run_windows(
                test_windows, a_cs, a_ds
            )
            a_cs.close()
            a_ds.close()
        finally:
            cs_to_ds.close()
            cs_server.stop()
            ds_server.stop()

        got = {(v.serial_number, v.time): v.label for v in ds_core2.verdicts}
        assert got == reference
        assert {(a.serial_number, a.time) for a in result.alarms} == {
            key for key, label in reference.items() if label is Label.ATTACK
        }

#!/usr/bin/env python

"""
Two-process harness for speculative-speculative decoding: a draft process
and a verifier process that share nothing but the wire messages they
exchange, advanced by a deterministic virtual clock.

Each round the draft sends one message (the speculations to verify, with a
hit bitmap and the draft distributions) and the verifier answers with one
message (the verification outcome and new length of every sequence). The
verifier never sees the speculation cache.
"""

import json
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple
import numpy as np

from cache import FanOutPlan, SpeculationCache, build_cache
from experiment import print_progress_bar
from pdtable import makepath4file
from sim import RunStats, SimConfig, VirtualClock, backup_speculation, sequence_streams
from specdec import Origin, Speculation, VerificationOutcome, draft, verify


class ProtocolViolation(RuntimeError):
    pass


class Direction(Enum):
    V2D = "v2d"
    D2V = "d2v"


@dataclass(frozen=True)
class WireMessage:
    round: int
    direction: Direction
    vclock: float
    payload: Dict

    def summary(self) -> Dict:
        if self.direction == Direction.V2D:
            return {
                "outcomes": [list(o) for o in self.payload["outcomes"]],
                "lengths": list(self.payload["lengths"]),
            }
        dists = self.payload["draft_dists"]
        return {
            "hit": list(self.payload["hit"]),
            "tokens": [list(t) for t in self.payload["tokens"]],
            "dist_numbers": int(sum(np.asarray(d).size for d in dists)),
        }

    def to_record(self) -> Dict:
        return {
            "round": self.round,
            "dir": self.direction.value,
            "payload_summary": self.summary(),
            "vclock": self.vclock,
        }


class Channel:
    def __init__(self, direction: Direction):
        self.direction = direction
        self._queue = deque()
        self.sent = 0

    def put(self, msg: WireMessage):
        if msg.direction != self.direction:
            raise ProtocolViolation(f"ERROR: {msg.direction.value} message put on the {self.direction.value} channel")
        self._queue.append(msg)
        self.sent += 1

    def get(self, expected_round: int) -> WireMessage:
        if len(self._queue) != 1:
            raise ProtocolViolation(
                f"ERROR: expected exactly one pending {self.direction.value} message in round {expected_round}, "
                f"found {len(self._queue)}"
            )
        msg = self._queue.popleft()
        if msg.round != expected_round:
            raise ProtocolViolation(
                f"ERROR: {self.direction.value} message for round {msg.round} arrived in round {expected_round}"
            )
        return msg


class LogicalProcess(ABC):
    def __init__(self, name: str):
        self.name = name
        self.local_time = 0.0

    @abstractmethod
    def handle(self, msg: WireMessage) -> Optional[WireMessage]:
        pass


class DraftProcess(LogicalProcess):
    def __init__(self, cfg: SimConfig, streams: List[Dict[str, np.random.Generator]], lazy: bool = False):
        super().__init__("draft")
        self.cfg = cfg
        self.lazy = lazy
        self.streams = streams
        self.contexts = [cfg.start_context() for _ in streams]
        self.specs: List[Speculation] = []
        self.caches: List[Optional[SpeculationCache]] = [None] * len(streams)
        self.cache_done = None

        self.lookups_p = 0
        self.hits_p = 0
        self.lookups_b = 0
        self.hits_b = 0
        self.hits: List[Optional[bool]] = [None] * len(streams)

    def _message(self, r: int, send_time: float) -> WireMessage:
        payload = {
            "hit": [None if h is None else bool(h) for h in self.hits],
            "tokens": [spec.tokens for spec in self.specs],
            "draft_dists": [spec.draft_dists.copy() for spec in self.specs],
        }
        return WireMessage(r, Direction.D2V, send_time, payload)

    def start(self) -> WireMessage:
        """Synchronous primary draft for round 0."""
        self.specs = [
            draft(self.cfg.pair.draft, ctx, self.cfg.K, self.cfg.scheme, rngs["draft"])
            for ctx, rngs in zip(self.contexts, self.streams)
        ]
        self.local_time += self.cfg.timing.T_p
        return self._message(0, self.local_time)

    def speculate_ahead(self):
        """
        Build every sequence's cache while the verifier works on the current
        round. The work starts when this process sent its last message and
        takes T_p on its own clock.
        """
        for s, rngs in enumerate(self.streams):
            spec = self.specs[s]
            self.caches[s] = build_cache(self.cfg.pair.draft, self.contexts[s], spec,
                                         self.cfg.plan_for(spec.origin), self.cfg.scheme, self.cfg.K,
                                         rngs["cache"], lazy=self.lazy)
        self.cache_done = self.local_time + self.cfg.timing.T_p

    def absorb(self, msg: WireMessage):
        """Apply the verifier's outcomes to the draft-side contexts."""
        for s, ((k, bonus), length) in enumerate(zip(msg.payload["outcomes"], msg.payload["lengths"])):
            emitted = self.specs[s].tokens[:k] + (bonus,)
            self.contexts[s].extend(emitted)
            if len(self.contexts[s]) != length:
                raise ProtocolViolation(
                    f"ERROR: sequence {s} has length {len(self.contexts[s])} on the draft side, "
                    f"verifier reports {length}"
                )

    def handle(self, msg: WireMessage) -> Optional[WireMessage]:
        if msg.direction != Direction.V2D:
            raise ProtocolViolation(f"ERROR: draft process received a {msg.direction.value} message")
        self.absorb(msg)
        for s, (k, bonus) in enumerate(msg.payload["outcomes"]):
            origin = self.specs[s].origin
            found = self.caches[s].lookup(VerificationOutcome(k, bonus))
            if origin == Origin.PRIMARY:
                self.lookups_p += 1
                self.hits_p += int(found.hit)
            else:
                self.lookups_b += 1
                self.hits_b += int(found.hit)
            self.hits[s] = found.hit
            if found.hit:
                self.specs[s] = found.speculation
            else:
                self.specs[s] = backup_speculation(self.cfg, self.contexts[s], self.streams[s]["backup"])
        self.caches = [None] * len(self.streams)

        if all(self.hits):
            send_time = max(msg.vclock, self.cache_done)
        else:
            send_time = msg.vclock + self.cfg.backup_time
        self.local_time = send_time
        return self._message(msg.round + 1, send_time)


class VerifierProcess(LogicalProcess):
    def __init__(self, cfg: SimConfig, streams: List[Dict[str, np.random.Generator]]):
        super().__init__("verifier")
        self.target = cfg.pair.target
        self.K = cfg.K
        self.rngs = [rngs["target"] for rngs in streams]
        self.contexts = [cfg.start_context() for _ in streams]
        self.n0 = len(self.contexts[0])
        self.emitted_per_round: List[List[int]] = []
        self.accepted_per_round: List[List[int]] = []

    def check_isolation(self):
        """The verifier may hold no cache or fan-out plan, directly or inside a container."""
        for name, val in vars(self).items():
            items = val if isinstance(val, (list, tuple)) else (val.values() if isinstance(val, dict) else [val])
            for item in items:
                if isinstance(item, (SpeculationCache, FanOutPlan)):
                    raise ProtocolViolation(f"ERROR: verifier attribute {name} references draft-side cache state")

    def handle(self, msg: WireMessage) -> WireMessage:
        if msg.direction != Direction.D2V:
            raise ProtocolViolation(f"ERROR: verifier received a {msg.direction.value} message")
        outcomes, lengths, emitted, accepted = [], [], [], []
        for s, (tokens, dists, hit) in enumerate(zip(msg.payload["tokens"], msg.payload["draft_dists"],
                                                     msg.payload["hit"])):
            if len(tokens) != self.K:
                raise ProtocolViolation(f"ERROR: sequence {s} sent {len(tokens)} tokens, expected {self.K}")
            origin = Origin.BACKUP if hit is False else Origin.PRIMARY
            result = verify(self.target, self.contexts[s], Speculation(tokens, dists, origin=origin), self.rngs[s])
            self.contexts[s].extend(result.emitted)
            outcomes.append((result.outcome.k, result.outcome.bonus))
            lengths.append(len(self.contexts[s]))
            emitted.append(len(result.emitted))
            accepted.append(result.outcome.k)
        self.emitted_per_round.append(emitted)
        self.accepted_per_round.append(accepted)
        self.local_time = msg.vclock + 1.0
        self.check_isolation()
        return WireMessage(msg.round, Direction.V2D, self.local_time, {"outcomes": outcomes, "lengths": lengths})


def run_protocol_harness(cfg: SimConfig, lazy: bool = False, verbose=False) -> Tuple[List[Dict], RunStats]:
    """
    Run cfg.rounds rounds with the draft and verifier as separate logical
    processes. Returns the message transcript and the run statistics.
    """
    cfg.validate(needs_plans=True)
    streams = sequence_streams(cfg.seed, cfg.batch_size)
    drafter = DraftProcess(cfg, streams, lazy=lazy)
    verifier = VerifierProcess(cfg, streams)
    d2v, v2d = Channel(Direction.D2V), Channel(Direction.V2D)
    clock = VirtualClock()
    transcript = []
    stats = RunStats(mode="ssd", batch_size=cfg.batch_size)

    def send(channel, msg):
        clock.advance_to(msg.vclock)
        channel.put(msg)
        transcript.append(msg.to_record())

    send(d2v, drafter.start())
    for r in range(cfg.rounds):
        msg = d2v.get(r)
        round_hit = r > 0 and all(msg.payload["hit"])
        if r > 0 and round_hit:
            stats.all_hit_rounds += 1

        drafter.speculate_ahead()
        reply = verifier.handle(msg)
        if cfg.timing.T_p < 1.0 and drafter.cache_done > reply.vclock:
            raise ProtocolViolation(
                f"ERROR: round {r} cache finished at {drafter.cache_done} after verification ended at {reply.vclock}"
            )
        send(v2d, reply)
        stats.rounds += 1

        if r + 1 < cfg.rounds:
            send(d2v, drafter.handle(v2d.get(r)))
        else:
            drafter.absorb(v2d.get(r))
        if verbose and ((r + 1) % max(1, cfg.rounds // 100) == 0 or r + 1 == cfg.rounds):
            print_progress_bar(r + 1, cfg.rounds, prefix="Protocol")

    if d2v.sent != cfg.rounds or v2d.sent != cfg.rounds:
        raise ProtocolViolation(
            f"ERROR: {cfg.rounds} rounds exchanged {d2v.sent} d2v and {v2d.sent} v2d messages"
        )

    stats.virtual_time = clock.now
    stats.streams = [ctx[verifier.n0:] for ctx in verifier.contexts]
    stats.tokens_emitted = int(sum(len(s) for s in stats.streams))
    stats.verifications = cfg.rounds * cfg.batch_size
    stats.accepted_total = int(sum(sum(a) for a in verifier.accepted_per_round))
    stats.lookups_p, stats.hits_p = drafter.lookups_p, drafter.hits_p
    stats.lookups_b, stats.hits_b = drafter.lookups_b, drafter.hits_b
    hit_rows = [rec["payload_summary"]["hit"] for rec in transcript if rec["dir"] == "d2v" and rec["round"] > 0]
    for hits, emitted in zip(hit_rows, verifier.emitted_per_round[1:]):
        for h, n in zip(hits, emitted):
            if h:
                stats.hit_tokens += n
            else:
                stats.miss_tokens += n
    return transcript, stats


def transcript_text(transcript: List[Dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in transcript)


def write_transcript(transcript: List[Dict], filename: str, verbose=False):
    try:
        makepath4file(filename)
        with open(filename, "w") as f:
            f.write(transcript_text(transcript))
    except Exception as e:
        raise RuntimeError(f"ERROR: Could not save transcript to {filename}: {str(e)}")
    if verbose:
        print(f"Saved {len(transcript)} messages into {filename}")

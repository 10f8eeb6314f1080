"""Simulator workers: draw scenes, render them and publish SAMPLE messages."""

from __future__ import annotations

import logging
import time

from ..controller import PriorUpdate
from ..kinematics import RobotModel, default_robot
from ..render import RenderConfig, render_beliefs, render_image
from ..scenegen import CameraRanges, DirichletState, make_rng, sample_scene, uniform_states
from ..transport import (
    PRIOR_UPDATE,
    EndOfStream,
    Hello,
    Publisher,
    SampleMessage,
    SessionError,
    Stats,
    Stream,
    Subscriber,
)

log = logging.getLogger(__name__)

# RNG stream tags; keeping them distinct makes every stream independent
TRAIN_STREAM = 1
VALIDATION_STREAM = 2
# validation samples carry ids above this so they never collide with training ids
VALIDATION_ID_BASE = 1 << 62


class Simulator:
    """One rendering engine with its own Dirichlet priors.

    Sample ``n`` of simulator ``s`` is drawn from the Philox stream
    ``(seed, TRAIN_STREAM, s, n)``; two simulators built with the same seed
    therefore produce identical samples for as long as their priors agree.
    """

    def __init__(
        self,
        sim_id: int,
        seed: int,
        render_config: RenderConfig,
        model: RobotModel | None = None,
        bins: int = 8,
        camera_ranges: CameraRanges | None = None,
    ):
        self.sim_id = sim_id
        self.seed = seed
        self.render_config = render_config
        self.model = model or default_robot()
        self.camera_ranges = camera_ranges or CameraRanges()
        self.states: list[DirichletState] = uniform_states(self.model.joint_count, bins)
        self.produced = 0
        self.updates_applied = 0

    def draw(self, states, sample_id: int, *stream: int) -> SampleMessage:
        rng = make_rng(self.seed, *stream)
        scene = sample_scene(states, self.camera_ranges, rng, sample_id=sample_id, sim_id=self.sim_id)
        image = render_image(scene, self.model, self.render_config)
        beliefs = render_beliefs(scene, self.model, self.render_config)
        return SampleMessage.from_scene(scene, image, beliefs)

    def step(self) -> SampleMessage:
        n = self.produced
        msg = self.draw(self.states, n, TRAIN_STREAM, self.sim_id, n)
        self.produced += 1
        return msg

    def validation_sample(self, epoch: int, index: int, size: int) -> SampleMessage:
        """Uniform-prior sample whose stream depends only on ``(epoch, index)``.

        The simulator's own priors are ignored, so validation difficulty
        stays fixed whatever feedback does.
        """
        states = uniform_states(self.model.joint_count, self.states[0].bin_count)
        msg = self.draw(states, VALIDATION_ID_BASE + epoch * size + index, VALIDATION_STREAM, epoch, index)
        self.produced += 1
        return msg

    def apply(self, update: PriorUpdate) -> bool:
        """Install a new concentration vector; ignores updates meant for others."""
        if update.target_sim_id != self.sim_id:
            return False
        j = update.joint_index
        if update.bin_count != self.states[j].bin_count:
            raise ValueError(f"update has {update.bin_count} bins, simulator uses {self.states[j].bin_count}")
        self.states[j] = DirichletState(j, update.theta.copy())
        self.updates_applied += 1
        return True


class SimulatorEndpoint:
    """A simulator wired to the sample channel and its control channel.

    Pending PRIOR_UPDATE messages are applied at the next sample boundary.
    """

    def __init__(self, sim: Simulator, sample_endpoint: str, control_endpoint: str | None = None):
        self.sim = sim
        self.control = Subscriber(control_endpoint, types=[PRIOR_UPDATE]) if control_endpoint else None
        self.publisher = Publisher(sample_endpoint, Hello(sim.sim_id, seed=sim.seed))

    def drain_control(self) -> int:
        if self.control is None:
            return 0
        n = 0
        while self.control.pending():
            if self.sim.apply(self.control.next(timeout=0)):
                n += 1
        return n

    def publish_next(self) -> SampleMessage:
        self.drain_control()
        msg = self.sim.step()
        self.publisher.publish(msg)
        return msg

    def publish_validation(self, epoch: int, index: int, size: int) -> SampleMessage:
        msg = self.sim.validation_sample(epoch, index, size)
        self.publisher.publish(msg)
        return msg

    def publish_stats(self) -> None:
        self.publisher.publish(Stats(self.sim.sim_id, published=self.sim.produced))

    def close(self) -> None:
        self.publisher.close()
        if self.control is not None:
            self.control.close()


class CooperativeStream(Stream):
    """In-process stream: each poll makes the simulator publish one sample,
    then hands back the next sample of that simulator from the trainer's
    subscriber. Used by the deterministic single-process mode."""

    def __init__(self, endpoint: SimulatorEndpoint, source: Stream, limit: int | None = None):
        self.endpoint = endpoint
        self.source = source
        self.limit = limit
        self.stream_id = endpoint.sim.sim_id
        self.seconds: list[float] = []  # time per simulation step

    def poll(self, timeout: float):
        if self.limit is not None and self.endpoint.sim.produced >= self.limit:
            raise EndOfStream
        t0 = time.perf_counter()
        self.endpoint.publish_next()
        self.seconds.append(time.perf_counter() - t0)
        return self.source.poll(timeout)


def serve(sim: Simulator, sample_endpoint: str, control_endpoint: str | None, count: int | None = None,
          stats_every: int = 64) -> int:
    """Publish samples until ``count`` is reached or the session drops."""
    ep = SimulatorEndpoint(sim, sample_endpoint, control_endpoint)
    try:
        while count is None or sim.produced < count:
            ep.publish_next()
            if sim.produced % stats_every == 0:
                ep.publish_stats()
        ep.publish_stats()
    except SessionError as exc:
        log.info("simulator %d stopping: %s", sim.sim_id, exc)
    finally:
        ep.close()
    return sim.produced

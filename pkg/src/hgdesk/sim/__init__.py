"""Simulated device fleet: subject profiles, signal synthesis, fleet runner."""
from hgdesk.sim.profiles import GaitProfile, GroundTruthLog, StsProfile, SubjectProfile, TruthEntry, make_profiles
from hgdesk.sim.synth import accel_doc, phq8_doc, pose_doc, synth_accel, synth_phq8, synth_pose

__all__ = [
    "GaitProfile",
    "StsProfile",
    "SubjectProfile",
    "TruthEntry",
    "GroundTruthLog",
    "make_profiles",
    "synth_phq8",
    "synth_accel",
    "synth_pose",
    "phq8_doc",
    "accel_doc",
    "pose_doc",
]

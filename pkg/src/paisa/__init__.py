"""Presence-announcement protocol stack: provisioning, time sync, signed
802.11 beacon announcements, receiver-side verification, and a deterministic
adversarial network simulator."""

__version__ = "0.1.0"

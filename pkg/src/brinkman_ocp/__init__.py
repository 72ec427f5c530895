"""Bilinear optimal control of Stokes-Brinkman flow."""

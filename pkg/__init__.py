"""kalgrad: learning the steady-state Kalman gain from output data."""

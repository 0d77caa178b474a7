"""Frontend biomimetico: estagio coclear e estagio cortical."""

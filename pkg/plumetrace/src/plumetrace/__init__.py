from plumetrace.resources import resource, resource_text, scenario_names

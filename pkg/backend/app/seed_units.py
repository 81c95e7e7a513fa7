import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from pydantic import ValidationError
from sqlalchemy.orm import Session

from . import models
from .error_handlers import DataError, MissingInputError
from .schemas import SemanticUnitDoc, WhitelistDoc, parse_document

logger = logging.getLogger(__name__)

# Organ whitelist with the anatomy-level locations allowed for each organ
ORGAN_ANATOMY: Dict[str, List[str]] = {
    "liver": ["centroid", "porta_hepatis", "gallbladder_fossa", "dome", "right_lobe", "left_lobe"],
    "gallbladder": ["centroid", "fundus", "body", "neck"],
    "right_kidney": ["centroid", "renal_hilum", "upper_pole", "lower_pole", "cortex"],
    "left_kidney": ["centroid", "renal_hilum", "upper_pole", "lower_pole", "cortex"],
    "spleen": ["centroid", "hilum", "upper_pole", "lower_pole"],
    "pancreas": ["head", "body", "tail", "uncinate_process"],
    "urinary_bladder": ["centroid", "dome", "trigone", "wall"],
    "aorta": ["abdominal_aorta", "bifurcation", "suprarenal_segment", "infrarenal_segment"],
    "inferior_vena_cava": ["intrahepatic_segment", "infrarenal_segment"],
    "stomach": ["antrum", "body", "fundus", "pylorus"],
    "heart": ["apex", "left_ventricle", "right_ventricle", "pericardium"],
}

STARTER_UNITS: List[Dict[str, Any]] = [
    {"symptom": "right upper quadrant pain after fatty meals", "diagnosis": "cholelithiasis",
     "organ": "gallbladder", "anatomy": ["fundus", "neck"], "basis": "biliary colic pattern"},
    {"symptom": "right upper quadrant pain with fever and positive murphy sign", "diagnosis": "acute cholecystitis",
     "organ": "gallbladder", "anatomy": ["body", "fundus"], "basis": "gallbladder wall inflammation"},
    {"symptom": "jaundice with dark urine and pale stools", "diagnosis": "biliary obstruction",
     "organ": "liver", "anatomy": ["porta_hepatis"], "basis": "dilated ducts near the hilum"},
    {"symptom": "fatigue with elevated liver enzymes", "diagnosis": "hepatic steatosis",
     "organ": "liver", "anatomy": ["centroid", "right_lobe"], "basis": "diffuse parenchymal echogenicity"},
    {"symptom": "right upper quadrant fullness and hepatomegaly", "diagnosis": "liver mass",
     "organ": "liver", "anatomy": ["right_lobe", "dome"], "basis": "focal lesion survey"},
    {"symptom": "right flank pain radiating to the groin", "diagnosis": "nephrolithiasis",
     "organ": "right_kidney", "anatomy": ["renal_hilum", "lower_pole"], "basis": "calculus with hydronephrosis"},
    {"symptom": "left flank pain with hematuria", "diagnosis": "ureteric stone",
     "organ": "left_kidney", "anatomy": ["renal_hilum"], "basis": "collecting system dilatation"},
    {"symptom": "flank pain with fever and dysuria", "diagnosis": "pyelonephritis",
     "organ": "right_kidney", "anatomy": ["cortex", "upper_pole"], "basis": "cortical inflammation"},
    {"symptom": "left upper quadrant pain after trauma", "diagnosis": "splenic injury",
     "organ": "spleen", "anatomy": ["centroid", "hilum"], "basis": "perisplenic fluid assessment"},
    {"symptom": "epigastric pain radiating to the back", "diagnosis": "acute pancreatitis",
     "organ": "pancreas", "anatomy": ["head", "body"], "basis": "peripancreatic edema"},
    {"symptom": "pulsatile abdominal mass", "diagnosis": "abdominal aortic aneurysm",
     "organ": "aorta", "anatomy": ["infrarenal_segment", "bifurcation"], "basis": "aortic diameter measurement"},
    {"symptom": "suprapubic pain with urinary retention", "diagnosis": "bladder outlet obstruction",
     "organ": "urinary_bladder", "anatomy": ["centroid", "trigone"], "basis": "post void residual volume"},
    {"symptom": "shortness of breath with leg swelling", "diagnosis": "heart failure",
     "organ": "heart", "anatomy": ["left_ventricle", "apex"], "basis": "ventricular function"},
]


def validate_unit_fields(unit: Dict[str, Any], whitelist: Mapping[str, Sequence[str]] = ORGAN_ANATOMY) -> None:
    organ = unit.get("organ")
    if organ not in whitelist:
        raise DataError(f"organ '{organ}' is not in the organ whitelist")
    unknown = [a for a in unit.get("anatomy", []) if a not in whitelist[organ]]
    if unknown:
        raise DataError(f"anatomy locations {unknown} are not allowed for organ '{organ}'")


def load_units_jsonl(path) -> List[Dict[str, Any]]:
    """Read semantic units from a JSON Lines file, one unit per line."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"semantic unit file not found: {path}")
    units = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            units.append(SemanticUnitDoc.model_validate_json(line).model_dump())
        except ValidationError as exc:
            raise DataError(f"{path}:{number}: invalid unit ({exc.errors()[0]['msg']})")
    logger.info(f"Loaded {len(units)} semantic units from {path}")
    return units


def load_organ_whitelist(path: Optional[str] = None) -> Dict[str, List[str]]:
    """Organ -> allowed anatomy locations, from a JSON file or the built-in table."""
    if path is None:
        return {organ: list(anatomy) for organ, anatomy in ORGAN_ANATOMY.items()}
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"organ whitelist not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})")
    doc = parse_document(WhitelistDoc, data)
    if not doc.organs:
        raise DataError(f"{path}: organ whitelist is empty")
    return doc.organs


def seed_units(db: Session, units: List[Dict[str, Any]] = None,
               whitelist: Mapping[str, Sequence[str]] = ORGAN_ANATOMY) -> int:
    """Insert units (the starter corpus by default) into the unit table."""
    units = STARTER_UNITS if units is None else units
    batch = []
    for unit in units:
        validate_unit_fields(unit, whitelist)
        record = models.SemanticUnitRecord(
            symptom=unit["symptom"],
            diagnosis=unit.get("diagnosis", ""),
            organ=unit["organ"],
            anatomy=list(unit.get("anatomy", [])),
            basis=unit.get("basis", ""),
        )
        if unit.get("id") is not None:
            record.id = int(unit["id"])
        batch.append(record)

        if len(batch) >= 100:
            db.add_all(batch)
            db.commit()
            batch.clear()

    if batch:
        db.add_all(batch)
        db.commit()

    total = db.query(models.SemanticUnitRecord).count()
    logger.info(f"Seeded {len(units)} semantic units ({total} in store)")
    return len(units)

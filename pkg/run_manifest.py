#!/usr/bin/env python3
"""
Manifiesto de ejecución de cada comando
Guarda en JSON el id de la ejecución, la configuración resuelta y el estado de cada imagen
"""
import json
import os
import uuid
from datetime import datetime
from typing import Dict, List, Optional

MANIFEST_FILENAME = 'run_manifest.json'


class RunManifest:
    def __init__(self, output_dir: str, command: str, config: Optional[Dict] = None):
        self.output_dir = output_dir
        self.path = os.path.join(output_dir, MANIFEST_FILENAME)
        os.makedirs(output_dir, exist_ok=True)

        self.data = {
            'id': str(uuid.uuid4()),
            'command': command,
            'status': 'created',
            'created_at': datetime.now().isoformat(),
            'config': config or {},
            'items': [],
            'errors': [],
        }
        self._save()

    def _save(self):
        """Escribe el manifiesto a disco"""
        with open(self.path, 'w', encoding='utf-8') as f:
            json.dump(self.data, f, indent=2, ensure_ascii=False, default=str)

    @staticmethod
    def load(path: str) -> Dict:
        """Carga un manifiesto existente (fichero o directorio)"""
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_FILENAME)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (FileNotFoundError, json.JSONDecodeError):
            return {}

    def add_item(self, source: str, output: Optional[str] = None, status: str = 'ok', **extra):
        """Registra una imagen procesada"""
        item = {'source': source, 'output': output, 'status': status}
        item.update(extra)
        self.data['items'].append(item)

    def add_error(self, source: str, message: str):
        self.data['errors'].append({'source': source, 'message': message})
        self.add_item(source, None, status='error', error=message)

    def update(self, **updates):
        """Actualiza campos de la ejecución y guarda"""
        for key, value in updates.items():
            self.data[key] = value
        if updates.get('status') in ('completed', 'failed'):
            self.data['completed_at'] = datetime.now().isoformat()
        self._save()

    def items(self) -> List[Dict]:
        return list(self.data['items'])

    def summary(self) -> Dict:
        """Resumen de la ejecución"""
        statuses = [item['status'] for item in self.data['items']]
        return {
            'total_items': len(statuses),
            'ok_items': statuses.count('ok'),
            'failed_items': statuses.count('error'),
            'status': self.data['status'],
        }

    def finish(self) -> Dict:
        summary = self.summary()
        summary['status'] = 'failed' if summary['failed_items'] else 'completed'
        self.update(status=summary['status'], summary=summary)
        return summary
